use c3de::data::{synth_generate, SynthConfig};

/// Least squares via normal equations with Gaussian elimination.
fn lstsq(rows: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let p = rows[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (r, &t) in rows.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += r[i] * r[j];
            }
            a[i][p] += r[i] * t;
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
    let resid = rows
        .iter()
        .zip(y)
        .map(|(r, t)| (t - r.iter().zip(&coef).map(|(x, c)| x * c).sum::<f64>()).abs())
        .fold(0.0, f64::max);
    (coef, resid)
}

/// Regresses node `node`, channel 0 flow on an intercept plus all K categories.
fn regress(cfg: &SynthConfig, node: usize) -> (Vec<f64>, f64) {
    let b = synth_generate(cfg).unwrap();
    let (n, c, k) = (b.n(), b.c(), b.k());
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for d in 0..b.days() {
        let m = b.day_to_month[d];
        let mut r = vec![1.0];
        r.extend_from_slice(&b.poi.data()[(m * n + node) * k..(m * n + node + 1) * k]);
        rows.push(r);
        y.push(b.flow.data()[(d * n + node) * c]);
    }
    lstsq(&rows, &y)
}

#[test]
fn noiseless_flow_is_affine_in_the_planted_category() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ar_coefficient: 0.0,
        ..SynthConfig::default()
    };
    for node in [0, 7, 19] {
        let (coef, resid) = regress(&cfg, node);
        assert!(resid <= 1e-9, "node {node}: residual {resid}");
        assert!((coef[1 + cfg.planted_category] - cfg.planted_strength).abs() < 1e-9);
    }
}

#[test]
fn regression_recovers_the_planted_structure() {
    let cfg = SynthConfig {
        noise_std: 0.02,
        seed: 5,
        ..SynthConfig::default()
    };
    for node in 0..cfg.n {
        let (coef, _) = regress(&cfg, node);
        for (j, &v) in coef[1..].iter().enumerate() {
            if j == cfg.planted_category {
                assert!((v - cfg.planted_strength).abs() < 0.05 * cfg.planted_strength, "node {node}: {coef:?}");
            } else {
                assert!(v.abs() < 0.05 * cfg.planted_strength, "node {node}: {coef:?}");
            }
        }
    }
}

#[test]
fn zero_strength_decouples_flow_from_poi() {
    let cfg = SynthConfig {
        planted_strength: 0.0,
        days: 2000,
        seed: 9,
        ..SynthConfig::default()
    };
    let b = synth_generate(&cfg).unwrap();
    let (n, c, k) = (b.n(), b.c(), b.k());
    let corr = |x: &[f64], y: &[f64]| {
        let m = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / m, y.iter().sum::<f64>() / m);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    };
    // within-node correlation: per-node means are removed so base levels cannot confound
    for cat in 0..k {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for node in 0..n {
            let xs: Vec<f64> = (0..b.days()).map(|d| b.poi.data()[(b.day_to_month[d] * n + node) * k + cat]).collect();
            let ys: Vec<f64> = (0..b.days()).map(|d| b.flow.data()[(d * n + node) * c]).collect();
            let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
            x.extend(xs.iter().map(|v| v - mx));
            y.extend(ys.iter().map(|v| v - my));
        }
        let r = corr(&x, &y);
        assert!(r.abs() < 0.1, "category {cat}: correlation {r}");
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let cfg = SynthConfig::default();
    assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
}
