use adverisf::data::*;
use adverisf::nn::MlpSpec;
use adverisf::pipeline::*;
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let epochs: usize = a[1].parse().unwrap();
    let seed: u64 = a[2].parse().unwrap();
    let mut spec = SyntheticSpec::default();
    if let Ok(n) = std::env::var("CAL_N") { spec.n_samples = n.parse().unwrap(); }
    let mut data = generate_synthetic(&spec, 0);
    split(&mut data, SplitMode::Ratio(0.7), 0.15, 0).unwrap();
    normalize(&mut data).unwrap();
    let mlp = MlpSpec::new(13, &[400, 400, 400], 1);
    let schedule = ScheduleSpec::joint(epochs, 3e-4, 20);
    let t = Instant::now();
    let (_, rec) = train_baseline_mlp(&mlp, &data, &schedule, seed, "h").unwrap();
    println!("mlp e={} s={}: test {:.3} train {:.3} valid {:.3} ({:.0}s)",
        epochs, seed, rec.test_r2, rec.train_r2, rec.valid_r2, t.elapsed().as_secs_f64());
}
