#![allow(dead_code)]

use mfpinet::nn::Parameters;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    pub kinks: usize,
}

fn nudge<N: Parameters<f64>>(net: &mut N, t: usize, i: usize, d: f64) {
    let mut k = 0;
    net.visit_mut("", &mut |_, p| {
        if k == t {
            p.value[i] += d;
        }
        k += 1;
    });
}

/// Compare the accumulated gradients of `net` with central differences of
/// `loss`, `per_tensor` random coordinates per parameter tensor.
///
/// A coordinate whose central differences at `h` and `h/2` disagree has an
/// activation or L1 kink inside the stencil, where a difference quotient says
/// nothing about the (sub)gradient; those are redrawn up to a few times and
/// counted in `kinks`.
pub fn check<N: Parameters<f64>>(
    net: &mut N,
    per_tensor: usize,
    seed: u64,
    mut loss: impl FnMut(&N) -> f64,
) -> GradCheck {
    let h = 1e-4;
    let floor = 1e-7;
    let mut analytic = Vec::new();
    net.visit("", &mut |_, p| analytic.push(p.grad.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        worst: 0.0,
        checked: 0,
        kinks: 0,
    };
    for (t, grad) in analytic.iter().enumerate() {
        for _ in 0..per_tensor {
            for _attempt in 0..8 {
                let i = rng.gen_range(0..grad.len());
                let mut central = |step: f64| {
                    nudge(net, t, i, step);
                    let up = loss(net);
                    nudge(net, t, i, -2.0 * step);
                    let down = loss(net);
                    nudge(net, t, i, step);
                    (up - down) / (2.0 * step)
                };
                let coarse = central(h);
                let fd = central(h / 2.0);
                if (coarse - fd).abs() > 2e-4 * coarse.abs().max(fd.abs()).max(floor) {
                    out.kinks += 1;
                    continue;
                }
                let an = grad[i];
                out.worst = out
                    .worst
                    .max((fd - an).abs() / fd.abs().max(an.abs()).max(floor));
                out.checked += 1;
                break;
            }
        }
    }
    out
}

/// Scalar transcription of both adversarial losses, element by element, with
/// probabilities clamped to `[1e-8, 1 - 1e-8]`. Returns `(L_G, L_D)`.
pub fn brute_force_losses(
    d_real: &[f64],
    d_fake: &[f64],
    g: &[Vec<f64>],
    t: &[Vec<f64>],
    alpha: f64,
) -> (f64, f64) {
    let eps = 1e-8;
    let clamp = |p: f64| p.max(eps).min(1.0 - eps);
    let n = d_fake.len() as f64;
    let mut lg = 0.0;
    let mut ld = 0.0;
    for i in 0..d_fake.len() {
        let mut l1 = 0.0;
        for j in 0..g[i].len() {
            l1 += (g[i][j] - t[i][j]).abs();
        }
        lg += alpha * -clamp(d_fake[i]).ln() + l1 / g[i].len() as f64;
        ld += clamp(d_real[i]).ln() + (1.0 - clamp(d_fake[i])).ln();
    }
    (lg / n, -ld / n)
}
