mod common;

use common::{camera, composite_signature, random_set, rel_err, rng};
use gblend::image::Image;
use gblend::model::{activate, GaussianSet, ParamGroup};
use gblend::rasterizer::{
    project, rasterize, rasterize_reference, rasterize_with, render, render_backward, RenderOutput,
    RenderSettings,
};
use rand::Rng;

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn tile_and_reference_paths_agree() {
    let cam = camera(64, 80.0);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = rng(seed);
        let n = r.random_range(1..=200);
        let set = random_set(&mut r, n, 1, 0.4);
        let records = project(&activate(&set).unwrap(), &cam).unwrap();
        let bg = [r.random(), r.random(), r.random()];
        let a = rasterize(records.clone(), 64, 64, bg).unwrap();
        let b = rasterize_reference(records, 64, 64, bg).unwrap();
        worst = worst
            .max(max_abs_diff(&a.rgb, &b.rgb))
            .max(max_abs_diff(&a.alpha, &b.alpha));
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
}

#[test]
fn renders_are_bit_reproducible() {
    let cam = camera(64, 80.0);
    let set = random_set(&mut rng(9), 150, 2, 0.4);
    let (_, a) = render(&set, &cam, [0.0; 3]).unwrap();
    let (_, b) = render(&set, &cam, [0.0; 3]).unwrap();
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.alpha, b.alpha);
}

#[test]
fn adding_a_splat_never_lowers_coverage() {
    let cam = camera(32, 40.0);
    let settings = RenderSettings {
        min_transmittance: 0.0,
        ..RenderSettings::default()
    };
    for seed in 0..30 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(2..40);
        let set = random_set(&mut r, n, 0, 0.4);
        let records = project(&activate(&set).unwrap(), &cam).unwrap();
        if records.len() < 2 {
            continue;
        }
        let fewer = records[..records.len() - 1].to_vec();
        let a = rasterize_with(fewer, 32, 32, [0.0; 3], &settings).unwrap();
        let b = rasterize_with(records, 32, 32, [0.0; 3], &settings).unwrap();
        for (lo, hi) in a.alpha.data().iter().zip(b.alpha.data()) {
            assert!(hi >= lo, "coverage dropped from {lo} to {hi}");
        }
    }
}

#[test]
fn black_background_color_is_bounded_by_coverage() {
    let cam = camera(32, 40.0);
    for seed in 0..30 {
        let set = random_set(&mut rng(2000 + seed), 30, 1, 0.4);
        let records = project(&activate(&set).unwrap(), &cam).unwrap();
        let max_color: Vec<f64> = (0..3)
            .map(|c| records.iter().map(|r| r.color[c]).fold(0.0, f64::max))
            .collect();
        let out = rasterize(records, 32, 32, [0.0; 3]).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let a = out.alpha.get(x, y, 0);
                for c in 0..3 {
                    assert!(out.rgb.get(x, y, c) <= max_color[c] * a + 1e-6);
                }
            }
        }
    }
}

/// Random linear loss `sum(w_rgb * rgb) + sum(w_a * alpha)`.
struct LinearLoss {
    w_rgb: Image,
    w_alpha: Image,
}

impl LinearLoss {
    fn new(r: &mut impl Rng, size: usize) -> Self {
        let rgb = (0..size * size * 3)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let alpha = (0..size * size)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Self {
            w_rgb: Image::from_vec(size, size, 3, rgb).unwrap(),
            w_alpha: Image::from_vec(size, size, 1, alpha).unwrap(),
        }
    }

    fn eval(&self, out: &RenderOutput) -> f64 {
        let a: f64 = out
            .rgb
            .data()
            .iter()
            .zip(self.w_rgb.data())
            .map(|(x, w)| x * w)
            .sum();
        let b: f64 = out
            .alpha
            .data()
            .iter()
            .zip(self.w_alpha.data())
            .map(|(x, w)| x * w)
            .sum();
        a + b
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let size = 32;
    let cam = camera(size as u32, 40.0);
    let h = 1e-4;
    let mut checked = 0;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut seed = 0;
    while checked < 500 {
        seed += 1;
        let mut r = rng(seed);
        let n = r.random_range(5..=20);
        let set = random_set(&mut r, n, 2, 0.4);
        let loss = LinearLoss::new(&mut r, size);
        let (act, out) = render(&set, &cam, [0.1, 0.2, 0.3]).unwrap();
        let grad = render_backward(&set, &act, &cam, &out, &loss.w_rgb, &loss.w_alpha).unwrap();
        let base_sig = composite_signature(&out);

        for _ in 0..60 {
            let group = ParamGroup::ALL[r.random_range(0..5)];
            let idx = r.random_range(0..set.group(group).len());
            let eval = |delta: f64| -> (f64, Vec<Vec<usize>>) {
                let mut p: GaussianSet<f64> = set.clone();
                p.group_mut(group)[idx] += delta;
                let (_, o) = render(&p, &cam, [0.1, 0.2, 0.3]).unwrap();
                (loss.eval(&o), composite_signature(&o))
            };
            let (lp, sp) = eval(h);
            let (lm, sm) = eval(-h);
            if sp != base_sig || sm != base_sig {
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.group(group)[idx];
            let e = rel_err(an, fd, 1e-6);
            if e > worst.0 {
                worst = (
                    e,
                    format!("{} #{idx} seed {seed}: analytic {an} fd {fd}", group.name()),
                );
            }
            checked += 1;
        }
    }
    println!(
        "checked {checked} over {seed} scenes, worst {:.2e} ({})",
        worst.0, worst.1
    );
    assert!(
        worst.0 < 1e-3,
        "worst relative error {} at {}",
        worst.0,
        worst.1
    );
}

#[test]
fn gradient_is_linear_in_upstream() {
    let cam = camera(32, 40.0);
    let mut r = rng(77);
    let set = random_set(&mut r, 12, 1, 0.4);
    let loss = LinearLoss::new(&mut r, 32);
    let (act, out) = render(&set, &cam, [0.0; 3]).unwrap();
    let g1 = render_backward(&set, &act, &cam, &out, &loss.w_rgb, &loss.w_alpha).unwrap();
    let g2 = render_backward(
        &set,
        &act,
        &cam,
        &out,
        &loss.w_rgb.scaled(2.0),
        &loss.w_alpha.scaled(2.0),
    )
    .unwrap();
    for group in ParamGroup::ALL {
        for (a, b) in g1.group(group).iter().zip(g2.group(group)) {
            assert_eq!(2.0 * a, *b);
        }
    }
}

#[test]
fn unseen_gaussian_has_zero_gradient() {
    let cam = camera(32, 40.0);
    let mut r = rng(5);
    let mut set = random_set(&mut r, 6, 1, 0.2);
    // Far off to the side (culled) and behind the camera.
    set.centers[0] = [30.0, 0.0, 3.0];
    set.centers[1] = [0.0, 0.0, -2.0];
    let loss = LinearLoss::new(&mut r, 32);
    // Upstream gradient only on the left half; Gaussian 2 sits on the right.
    set.centers[2] = [0.3 * 3.0, 0.0, 3.0];
    set.log_scales[2] = [-4.0; 3];
    let mut w_rgb = loss.w_rgb.clone();
    let mut w_alpha = loss.w_alpha.clone();
    for y in 0..32 {
        for x in 16..32 {
            for c in 0..3 {
                w_rgb.set(x, y, c, 0.0);
            }
            w_alpha.set(x, y, 0, 0.0);
        }
    }
    let (act, out) = render(&set, &cam, [0.0; 3]).unwrap();
    let g = render_backward(&set, &act, &cam, &out, &w_rgb, &w_alpha).unwrap();
    for i in 0..3 {
        assert_eq!(g.centers[i], [0.0; 3]);
        assert_eq!(g.log_scales[i], [0.0; 3]);
        assert_eq!(g.rotations[i], [0.0; 4]);
        assert_eq!(g.opacity_logits[i], 0.0);
        assert!(g.sh[i * g.sh_stride()..(i + 1) * g.sh_stride()]
            .iter()
            .all(|v| *v == 0.0));
    }
}

#[test]
fn backward_rejects_mismatched_upstream() {
    let cam = camera(32, 40.0);
    let set = random_set(&mut rng(3), 4, 0, 0.4);
    let (act, out) = render(&set, &cam, [0.0; 3]).unwrap();
    let bad = Image::new(16, 16, 3);
    assert!(render_backward(&set, &act, &cam, &out, &bad, &Image::new(32, 32, 1)).is_err());
}
