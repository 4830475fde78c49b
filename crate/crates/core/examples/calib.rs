//! Scratch calibration harness (not part of the deliverable surface).

use nlsal_core::grid::Dims;
use nlsal_core::metrics::confusion;
use nlsal_core::phantom::{generate, suite, PhantomSpec};
use nlsal_core::pipeline::*;
use nlsal_core::yosida::{run_yosida_traced, InnerStop, RSchedule, YosidaOptions};
use nlsal_core::*;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "suite".into());
    match which.as_str() {
        "suite" => run_suite(),
        "hist" => run_hist(),
        "yosida" => run_yosida_check(),
        "theorem" => run_theorem(),
        "vol" => run_volume(),
        _ => eprintln!("unknown experiment"),
    }
}

fn cfg_with(p: f64, scheme: Scheme) -> SegmentConfig {
    let mut cfg = SegmentConfig::default();
    cfg.scheme = scheme;
    cfg.params.p = p;
    cfg
}

fn run_suite() {
    let phantoms = suite(Dims::d2(64, 64), 10, 0.05);
    for &p in &[0.5, 2.0] {
        let cfg = cfg_with(p, Scheme::Quantized);
        let mut dices = Vec::new();
        let mut nearbin = Vec::new();
        let mut deltas = Vec::new();
        let t0 = std::time::Instant::now();
        for (f, truth) in &phantoms {
            let seg = segment(f, &cfg).unwrap();
            let m = confusion(&seg.mask, truth).unwrap();
            dices.push(m.dice.unwrap_or(0.0));
            let gap = 1.0 / (cfg.params.q_levels as f64 - 1.0);
            let nb = seg
                .field
                .values()
                .iter()
                .filter(|&&v| v <= gap || v >= 1.0 - gap)
                .count() as f64
                / seg.field.len() as f64;
            nearbin.push(nb);
            deltas.push(seg.stats.runs[0].delta);
            print!("steps={} ", seg.stats.runs[0].steps);
        }
        println!();
        println!(
            "p={}: dice={:?}\n  mean_dice={:.4} nearbin_min={:.4} delta[0]={:.3} elapsed={:.1}s",
            p,
            dices.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            dices.iter().sum::<f64>() / dices.len() as f64,
            nearbin.iter().cloned().fold(1.0, f64::min),
            deltas[0],
            t0.elapsed().as_secs_f64()
        );
    }
}

fn run_hist() {
    // Distribution of final values and convergence tail for one phantom.
    let (f, _) = generate(&PhantomSpec::new(Dims::d2(64, 64), 1).with_noise(0.05));
    let args: Vec<String> = std::env::args().collect();
    let p: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let alpha: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let lambda: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let tau_scale: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let mut cfg = cfg_with(p, Scheme::Quantized);
    cfg.params.alpha = alpha;
    cfg.params.lambda = lambda;
    cfg.params.n_steps = n;
    let delta = estimate_delta(&f, &default_brain_mask(&f), RegressionCoeffs::default()).unwrap();
    let mut params = cfg.params.resolve(delta, cfg.scheme).unwrap();
    params.tau *= tau_scale;
    println!("delta={:.3} a={:.3} tau={:.4} tau*alpha={:.4}", delta, params.a(), params.tau, params.tau * params.alpha);
    let (u, trace) = nlsal_core::quantized::run_quantized_traced(
        &f,
        &params,
        ConvMode::Fft,
        &RunOptions { early_exit: true, record_energy: false },
    )
    .unwrap();
    let mut hist = [0usize; 12];
    for &v in u.values() {
        let bin = ((v * 10.0).floor() as usize).min(9) + 1;
        let bin = if v <= 1.0 / 255.0 {
            0
        } else if v >= 1.0 - 1.0 / 255.0 {
            11
        } else {
            bin
        };
        hist[bin] += 1;
    }
    println!("steps={} hist(rail0,0-.1,...,.9-1,rail1)={:?}", trace.steps, hist);
    let tail: Vec<f64> = trace.sup_diffs.iter().rev().take(6).cloned().collect();
    println!("sup_diff tail={:?}", tail.iter().map(|d| (d * 1e5).round() / 1e5).collect::<Vec<_>>());
}

fn run_yosida_check() {
    let phantoms = suite(Dims::d2(64, 64), 10, 0.05);
    let cfg = cfg_with(0.5, Scheme::Quantized);
    let t0 = std::time::Instant::now();
    let mut worst_rel = 0.0f64;
    let mut worst_dis = 0.0f64;
    let mut worst_viol = 0.0f64;
    for (f, _) in &phantoms {
        let delta = estimate_delta(f, &default_brain_mask(f), RegressionCoeffs::default()).unwrap();
        let params = cfg.params.resolve(delta, cfg.scheme).unwrap();
        let comparison = nlsal_core::metrics::compare_schemes(
            f,
            &params,
            &YosidaOptions::default(),
        )
        .unwrap();
        let (u, trace) = run_yosida_traced(f, &params, &YosidaOptions::default()).unwrap();
        let v = nlsal_core::yosida::violation(&u);
        let viol = v.sup_neg.max(v.sup_over);
        worst_rel = worst_rel.max(comparison.final_rel_diff);
        worst_dis = worst_dis.max(comparison.disagreement_fraction);
        worst_viol = worst_viol.max(viol);
        println!(
            "delta={:.3} rel={:.4} disagree={:.4} viol_sup={:.4} steps={} cg_last={}",
            delta,
            comparison.final_rel_diff,
            comparison.disagreement_fraction,
            viol,
            trace.run.steps,
            trace.outer.last().map(|o| o.inner.last().unwrap().cg.iterations).unwrap_or(0)
        );
    }
    println!(
        "WORST rel={:.4} disagree={:.4} viol={:.4} elapsed={:.1}s",
        worst_rel,
        worst_dis,
        worst_viol,
        t0.elapsed().as_secs_f64()
    );
}

fn run_theorem() {
    // Fixed-r runs; stable regime needs a * r_max < 1.
    let (f, _) = generate(&PhantomSpec::new(Dims::d2(64, 64), 3).with_noise(0.0));
    let spec = ParamSpec {
        delta: DeltaRule::Fixed(1.2),
        alpha: 1.0,
        n_steps: 40,
        ..ParamSpec::default()
    };
    let params = spec.resolve(1.2, Scheme::Yosida).unwrap();
    println!("a={:.3} tau={:.4}", params.a(), params.tau);
    let t0 = std::time::Instant::now();
    let mut pts = Vec::new();
    for j in 1..=8 {
        let r = 2f64.powi(-j);
        let opts = YosidaOptions {
            schedule: RSchedule::Fixed(r),
            stop: InnerStop::Tolerance { max_iters: 30 },
            run: RunOptions {
                early_exit: false,
                record_energy: false,
            },
        };
        let (_, trace) = run_yosida_traced(&f, &params, &opts).unwrap();
        let v: f64 = params.tau
            * trace
                .outer
                .iter()
                .map(|o| o.violation.l2_sq)
                .sum::<f64>();
        println!("r=2^-{} V={:.6e} V/r={:.6e}", j, v, v / r);
        pts.push((r.ln(), v.ln()));
    }
    // Least-squares slope of ln V vs ln r.
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    println!("slope={:.3} elapsed={:.1}s", slope, t0.elapsed().as_secs_f64());
}

fn run_volume() {
    let spec = PhantomSpec::new(Dims::d3(64, 64, 32), 5)
        .with_blobs(1)
        .with_noise(0.05);
    let (f, truth) = generate(&spec);
    println!("fg fraction = {:.4}", truth.foreground_count() as f64 / truth.len() as f64);
    let mut cfg = cfg_with(0.5, Scheme::Quantized);
    cfg.params.q_levels = 32;
    cfg.params.n_steps = 40;
    let t0 = std::time::Instant::now();
    cfg.mode = Mode::ThreeD;
    let seg3 = segment(&f, &cfg).unwrap();
    let d3 = confusion(&seg3.mask, &truth).unwrap().dice.unwrap_or(0.0);
    println!("3d dice={:.4} elapsed={:.1}s steps={}", d3, t0.elapsed().as_secs_f64(), seg3.stats.runs[0].steps);
    let t1 = std::time::Instant::now();
    cfg.mode = Mode::TwoDPerSlice;
    let seg2 = segment(&f, &cfg).unwrap();
    let d2 = confusion(&seg2.mask, &truth).unwrap().dice.unwrap_or(0.0);
    println!("2d dice={:.4} elapsed={:.1}s", d2, t1.elapsed().as_secs_f64());
}
