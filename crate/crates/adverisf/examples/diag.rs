use adverisf::data::*;
use ndarray::{Array1, Array2};

fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut m = a.clone();
    let mut v = b.clone();
    for i in 0..n {
        let mut p = i;
        for r in i + 1..n {
            if m[[r, i]].abs() > m[[p, i]].abs() { p = r; }
        }
        for c in 0..n { let t = m[[i, c]]; m[[i, c]] = m[[p, c]]; m[[p, c]] = t; }
        let t = v[i]; v[i] = v[p]; v[p] = t;
        for r in i + 1..n {
            let f = m[[r, i]] / m[[i, i]];
            for c in i..n { m[[r, c]] -= f * m[[i, c]]; }
            v[r] -= f * v[i];
        }
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = v[i];
        for c in i + 1..n { s -= m[[i, c]] * x[c]; }
        x[i] = s / m[[i, i]];
    }
    x
}

fn main() {
    let mut spec = SyntheticSpec::default();
    if let Ok(n) = std::env::var("CAL_N") { spec.n_samples = n.parse().unwrap(); }
    let (mut ds, lat) = generate_synthetic_full(&spec, 0);
    split(&mut ds, SplitMode::Ratio(0.7), 0.15, 0).unwrap();

    let y: Vec<f64> = ds.y.to_vec();
    let test = &ds.test_idx;
    let yt: Vec<f64> = test.iter().map(|&i| y[i]).collect();

    // oracle: true signal
    let sig: Vec<f64> = test.iter().map(|&i| lat.f_dom[i] + spec.subtle_scale * lat.f_sub[i]).collect();
    println!("oracle signal R2: {:.3}", r_squared(&sig, &yt).unwrap());
    let dom: Vec<f64> = test.iter().map(|&i| lat.f_dom[i]).collect();
    println!("oracle dominant-only R2: {:.3}", r_squared(&dom, &yt).unwrap());

    // linear regression on train
    let tr = &ds.train_idx;
    let d = ds.x.ncols() + 1;
    let mut xtx = Array2::zeros((d, d));
    let mut xty = Array1::zeros(d);
    let feat = |i: usize, j: usize| if j == 0 { 1.0 } else { ds.x[[i, j - 1]] };
    for &i in tr {
        for a in 0..d {
            xty[a] += feat(i, a) * y[i];
            for b in 0..d { xtx[[a, b]] += feat(i, a) * feat(i, b); }
        }
    }
    for a in 0..d { xtx[[a, a]] += 1e-8; }
    let w = solve(&xtx, &xty);
    let pred: Vec<f64> = test.iter().map(|&i| (0..d).map(|a| w[a] * feat(i, a)).sum()).collect();
    println!("linear regression test R2: {:.3}", r_squared(&pred, &yt).unwrap());
    let ptr: Vec<f64> = tr.iter().map(|&i| (0..d).map(|a| w[a] * feat(i, a)).sum()).collect();
    let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
    println!("linear regression train R2: {:.3}", r_squared(&ptr, &ytr).unwrap());
}
