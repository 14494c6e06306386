use adverisf::adversarial::AdvSpec;
use adverisf::data::*;
use adverisf::latent::BetaSpec;
use adverisf::nn::MlpSpec;
use adverisf::pipeline::*;
use adverisf::separation::BlockSpec;
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let e1: usize = a[1].parse().unwrap();
    let e2: usize = a[2].parse().unwrap();
    let seed: u64 = a[3].parse().unwrap();
    let lambda: f64 = a[4].parse().unwrap();
    let beta1: f64 = a[5].parse().unwrap();
    let fp_hidden: usize = a[6].parse().unwrap();
    let d_task: usize = a.get(7).map(|v| v.parse().unwrap()).unwrap_or(2);
    let n_critic: usize = a.get(8).map(|v| v.parse().unwrap()).unwrap_or(2);
    let mut spec = SyntheticSpec::default();
    if let Ok(n) = std::env::var("CAL_N") { spec.n_samples = n.parse().unwrap(); }
    let mut data = generate_synthetic(&spec, 0);
    split(&mut data, SplitMode::Ratio(0.7), 0.15, 0).unwrap();
    normalize(&mut data).unwrap();

    let block = |input, d_task, d_noise, bt: BetaSpec, bn: BetaSpec| BlockSpec {
        input_dim: input, d_task, d_noise, hidden: vec![100, 100], activation_slope: 0.01,
        beta_task: bt, beta_noise: bn, detach_z_task: false,
    };
    let fp: Vec<usize> = if fp_hidden == 0 { vec![] } else { vec![fp_hidden] };
    let model = ModelSpec {
        layers: vec![
            block(13, d_task, 5, BetaSpec::gaussian(beta1, 0.001), BetaSpec::fixed(8e-5)),
            block(5, d_task, 3, BetaSpec::fixed(4e-4), BetaSpec::fixed(8e-5)),
        ],
        adv: vec![
            AdvSpec::new(d_task, 5, &[50, 50], lambda, n_critic),
            AdvSpec::new(d_task, 3, &[50, 50], lambda, n_critic),
        ],
        final_predictor: MlpSpec::new(2 * d_task, &fp, 1),
    };
    let schedule = ScheduleSpec::two_stage(&[e1, e2], &[3e-4, 2e-4], 20);
    let t = Instant::now();
    let variant = std::env::var("CAL_VARIANT").ok()
        .map(|v| AblationVariant::parse(&v).unwrap()).unwrap_or(AblationVariant::A0);
    let out = train_adverisf(&model, &data, &schedule, variant, seed, "h").unwrap();
    println!("{:?} e={}+{} s={} lam={} b1={} fp={} dt={} nc={}: test {:.3} train {:.3} valid {:.3} ({:.0}s)",
        variant, e1, e2, seed, lambda, beta1, fp_hidden, d_task, n_critic,
        out.record.test_r2, out.record.train_r2, out.record.valid_r2, t.elapsed().as_secs_f64());
}
