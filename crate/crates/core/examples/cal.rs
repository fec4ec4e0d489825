// temporary calibration harness (deleted before release)
use frieren_core::config::RunConfig;
use frieren_core::eval::evaluate_model;
use frieren_core::fed::{cust, make_prior_teacher, pretrain, run_federation, Aggregator, TrainMode};
use frieren_core::synthdata::*;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let text = std::fs::read_to_string("/tmp/cal/clear.conf").unwrap();
    let mut cfg = RunConfig::parse(&text).unwrap();
    cfg.seed = seed; cfg.benchmark.seed = seed; cfg.pretrain.seed = seed; cfg.fed.seed = seed;

    let bench = make_benchmark(&cfg.benchmark).unwrap();
    let out = pretrain(bench.source.images().unwrap(), &bench.eval_images, &cfg.model_dims(), &cfg.pretrain).unwrap();
    let w0 = out.params;

    // per-domain zero-shot mIoU of the pretrained model
    let sig = class_signatures(cfg.benchmark.classes, cfg.benchmark.channels);
    print!("seed {seed} zero-shot: ");
    for d in &bench.domains {
        let imgs: Vec<LabeledImage> = (0..48).map(|i| {
            let s = 900_000 + seed * 1000 + i as u64;
            let labels = gen_label_map(s, cfg.benchmark.height, cfg.benchmark.width, cfg.benchmark.classes);
            render(&labels, cfg.benchmark.height, cfg.benchmark.width, &sig, d, s).unwrap()
        }).collect();
        let (_, miou) = evaluate_model(&w0, &imgs).unwrap();
        print!("{}={:.3} ", d.name, miou);
    }
    println!();

    let so = evaluate_model(&w0, &bench.eval_images).unwrap().1;
    if std::env::var("PRETRAIN_ONLY").is_ok() { return; }
    let prior = make_prior_teacher(&w0, cfg.fed.tau_p);

    let mut swa_cfg = cfg.fed.clone();
    swa_cfg.aggregator = Aggregator::FedSwa; swa_cfg.mode = TrainMode::Unsup;
    let swa = run_federation(&w0, &bench.clients, &bench.eval_images, &swa_cfg, Some(&prior)).unwrap();

    let mut avg_cfg = swa_cfg.clone();
    avg_cfg.aggregator = Aggregator::FedAvg;
    let avg = run_federation(&w0, &bench.clients, &bench.eval_images, &avg_cfg, Some(&prior)).unwrap();

    let pool = bench.pooled_clients();
    let mut cu_cfg = swa_cfg.clone();
    if let Ok(r) = std::env::var("CUST_ROUNDS") { cu_cfg.rounds = r.parse().unwrap(); }
    if let Ok(r) = std::env::var("CUST_RHO") { cu_cfg.poly_rho = r.parse().unwrap(); }
    if let Ok(r) = std::env::var("CUST_ETA") { cu_cfg.eta = r.parse().unwrap(); }
    if let Ok(r) = std::env::var("CUST_BATCH") { cu_cfg.batch_size = r.parse().unwrap(); }
    let cu = cust(&w0, &pool, &bench.eval_images, &cu_cfg, Some(&prior)).unwrap();

    let mut sup_cfg = cfg.fed.clone();
    sup_cfg.aggregator = Aggregator::FedAvg; sup_cfg.mode = TrainMode::Sup;
    let tsft_f = run_federation(&w0, &bench.clients, &bench.eval_images, &sup_cfg, Some(&prior)).unwrap();

    let mut semi_cfg = sup_cfg.clone();
    semi_cfg.mode = TrainMode::Semisup;
    let tsft_q = run_federation(&w0, &bench.clients, &bench.eval_images, &semi_cfg, Some(&prior)).unwrap();

    let last = |r: &frieren_core::fed::FederationOutcome| r.records.last().unwrap().miou_eval;
    let traj = |name: &str, r: &frieren_core::fed::FederationOutcome| {
        let pts: Vec<String> = r.records.iter().step_by(6).map(|x| format!("{:.2}", x.miou_eval)).collect();
        let mf: Vec<String> = r.records.iter().step_by(6).map(|x| format!("{:.2}", x.breakdown.masked_pixel_fraction)).collect();
        println!("  {name}: miou {} | mask {} | scale {:.1}", pts.join(" "), mf.join(" "), r.params.scale);
    };
    traj("SWA ", &swa);
    traj("AVG ", &avg);
    traj("CUST", &cu);
    let tail_std = |r: &frieren_core::fed::FederationOutcome| {
        let n = r.records.len(); let k = (n as f64 * 0.2).ceil() as usize;
        let tail: Vec<f64> = r.records[n - k..].iter().map(|x| x.miou_eval).collect();
        let m = tail.iter().sum::<f64>() / tail.len() as f64;
        (tail.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / tail.len() as f64).sqrt()
    };
    println!(
        "seed {seed}: SO={so:.3} FFREEDG={:.3} CUST={:.3} AVG={:.3} TSFT_F={:.3} TSFT_Q={:.3} | swa_std={:.4} avg_std={:.4} | SO<FF={} CUST>=FF-1pt={} F>=Q={} Q>=FF={} swa_stabler={}",
        last(&swa), last(&cu), last(&avg), last(&tsft_f), last(&tsft_q),
        tail_std(&swa), tail_std(&avg),
        so < last(&swa), last(&cu) >= last(&swa) - 0.01, last(&tsft_f) >= last(&tsft_q), last(&tsft_q) >= last(&swa),
        tail_std(&swa) < tail_std(&avg),
    );
}
