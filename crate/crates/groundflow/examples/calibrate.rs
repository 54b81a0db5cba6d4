use groundflow::scenario::{run_scenario, ArtifactLevel, ScenarioSpec};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // usage: calibrate <epochs> <lambda_pde> <lambda_bc> <lambda_ic> <lr> [field_seed]
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let lpde: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e4);
    let lbc: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let lic: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(11);
    let tmin: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.0);

    let text = format!(
        "kind = future_prediction\n\
         field_seed = {seed}\n\
         epochs = {epochs}\n\
         lr = {lr}\n\
         lambda_pde = {lpde}\n\
         lambda_bc = {lbc}\n\
         lambda_ic = {lic}\n\
         n_colloc = 2000\n\
         colloc_t_min = {tmin}\n\
         log_every = 200\n"
    );
    let spec = ScenarioSpec::from_document(&text).unwrap();
    let t0 = Instant::now();
    let dir = std::env::temp_dir().join(format!("gfcal-{}", std::process::id()));
    let out = run_scenario(&spec, Some(&dir), ArtifactLevel::Light).unwrap();
    let pair = out.pair().unwrap();
    println!(
        "epochs={epochs} lpde={lpde:.0e} lbc={lbc} lic={lic} lr={lr} seed={seed} tmin={tmin} | guided L2={:.4} R2={:.5} ({:.0}s) | baseline L2={:.4} R2={:.5} ({:.0}s) | wall {:.0}s",
        pair.guided.relative_l2,
        pair.guided.r2_score,
        pair.guided_wall_ms as f64 / 1e3,
        pair.baseline.relative_l2,
        pair.baseline.r2_score,
        pair.baseline_wall_ms as f64 / 1e3,
        t0.elapsed().as_secs_f64()
    );
    let steps: Vec<String> = pair
        .guided
        .per_step
        .iter()
        .step_by(6)
        .map(|m| format!("s{}:{:.3}", m.step, m.relative_l2))
        .collect();
    println!("  guided per-step L2: {}", steps.join(" "));
    if let Ok(log) = std::fs::read_to_string(dir.join("guided_train_log.csv")) {
        let lines: Vec<&str> = log.lines().collect();
        println!("  {}", lines[0]);
        if lines.len() > 3 {
            println!("  mid:   {}", lines[lines.len() / 2]);
        }
        if let Some(last) = lines.last() {
            println!("  final: {last}");
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}
