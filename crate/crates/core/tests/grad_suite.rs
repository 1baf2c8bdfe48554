//! Finite-difference validation of the tape: every primitive with a
//! hand-derived adjoint, the losses, one full block, and the end-to-end
//! micro model.

mod common;

use common::*;
use sfusion::autodiff::{finite_diff_check, Eager, Ops, ParamSet, Tape};
use sfusion::error::Result;
use sfusion::losses::{loss_int, loss_ssim, loss_text, total_loss, Aggregate, LossWeights};
use sfusion::pipeline::{gradient_check, FusionConfig, Model};
use sfusion::ssd::{block_forward, BlockDims, BlockIds, MaskMode, ScanDir};
use sfusion::tensor::{ConvSpec, Tensor};

/// Check the tape gradient of `scalar_of(param)` against central
/// differences for a single-parameter computation. `scale` conditions the
/// finite differencing: both the objective and the analytic gradient are
/// multiplied by it, which leaves relative errors intact on meaningful
/// entries while keeping f64 evaluation noise below the checker's 1e-8
/// absolute guard.
fn check_scaled<FT, FE>(value: Tensor, mut taped: FT, eager: FE, scale: f64, tol: f64, what: &str)
where
    FT: FnMut(&mut Tape, sfusion::autodiff::Var) -> Result<sfusion::autodiff::Var>,
    FE: Fn(&Tensor) -> Result<f64>,
{
    let mut ps = ParamSet::new();
    let id = ps.register("p", value.clone());
    let mut tape = Tape::new();
    let p = tape.load(&ps, id);
    let loss = taped(&mut tape, p).unwrap();
    tape.backward(loss, &mut ps).unwrap();
    let analytic = sfusion::tensor::scale(ps.grad(id), scale);
    let mut scaled_eval = |t: &Tensor| -> Result<f64> { Ok(eager(t)? * scale) };
    let err = finite_diff_check(&mut scaled_eval, &value, &analytic, 1e-5).unwrap();
    assert!(err < tol, "{what}: max rel err {err} >= {tol}");
}

fn check_single<FT, FE>(value: Tensor, taped: FT, eager: FE, tol: f64, what: &str)
where
    FT: FnMut(&mut Tape, sfusion::autodiff::Var) -> Result<sfusion::autodiff::Var>,
    FE: Fn(&Tensor) -> Result<f64>,
{
    check_scaled(value, taped, eager, 1.0, tol, what);
}

#[test]
fn conv2d_weight_gradient() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, [1, 2, 6, 6], -1.0, 1.0);
    let w0 = random_tensor(&mut r, [3, 2, 3, 3], -0.5, 0.5);
    let spec = ConvSpec::new(2, 1, 1, 1);
    let xc = x.clone();
    check_single(
        w0,
        |t, w| {
            let xv = t.lift(xc.clone());
            let y = t.conv2d(&xv, &w, None, spec)?;
            let sq = t.mul(&y, &y)?;
            t.sum_all(&sq)
        },
        |w| {
            let y = sfusion::tensor::conv2d(&x, w, None, spec)?;
            Ok(y.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "conv2d weight",
    );
}

#[test]
fn conv2d_input_gradient_with_truncating_cover() {
    // 3x3 stride-2 pad-1 on even sizes leaves the last row/col uncovered;
    // the input gradient must stay exact there (zeros).
    let mut r = rng(2);
    let x0 = random_tensor(&mut r, [1, 1, 6, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, [2, 1, 3, 3], -0.5, 0.5);
    let spec = ConvSpec::new(2, 1, 1, 1);
    let wc = w.clone();
    check_single(
        x0,
        |t, x| {
            let wv = t.lift(wc.clone());
            let y = t.conv2d(&x, &wv, None, spec)?;
            let sq = t.mul(&y, &y)?;
            t.sum_all(&sq)
        },
        |x| {
            let y = sfusion::tensor::conv2d(x, &w, None, spec)?;
            Ok(y.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "conv2d input (truncating)",
    );
}

#[test]
fn conv_transpose2d_gradients() {
    let mut r = rng(3);
    let y0 = random_tensor(&mut r, [1, 2, 4, 4], -1.0, 1.0);
    let w0 = random_tensor(&mut r, [2, 1, 2, 2], -0.7, 0.7);
    let spec = ConvSpec::new(2, 1, 1, 0);
    let yc = y0.clone();
    let wc = w0.clone();
    check_single(
        w0,
        |t, w| {
            let yv = t.lift(yc.clone());
            let out = t.conv_transpose2d(&yv, &w, spec)?;
            let sq = t.mul(&out, &out)?;
            t.sum_all(&sq)
        },
        |w| {
            let out = sfusion::tensor::conv_transpose2d(&yc, w, spec)?;
            Ok(out.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "conv_transpose2d weight",
    );
    check_single(
        yc.clone(),
        |t, y| {
            let wv = t.lift(wc.clone());
            let out = t.conv_transpose2d(&y, &wv, spec)?;
            let sq = t.mul(&out, &out)?;
            t.sum_all(&sq)
        },
        |y| {
            let out = sfusion::tensor::conv_transpose2d(y, &wc, spec)?;
            Ok(out.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "conv_transpose2d input",
    );
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng(4);
    let x0 = random_tensor(&mut r, [2, 5, 3, 3], -1.0, 1.0);
    let gamma = random_tensor(&mut r, [1, 5, 1, 1], 0.5, 1.5);
    let beta = random_tensor(&mut r, [1, 5, 1, 1], -0.3, 0.3);
    let (gc, bc) = (gamma.clone(), beta.clone());
    let x1 = x0.clone();
    check_single(
        x0,
        |t, x| {
            let g = t.lift(gc.clone());
            let b = t.lift(bc.clone());
            let y = t.layer_norm(&x, &g, &b, 1e-5)?;
            let sq = t.mul(&y, &y)?;
            t.sum_all(&sq)
        },
        |x| {
            let y = sfusion::tensor::layer_norm(x, &gamma, &beta, 1e-5)?;
            Ok(y.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "layer_norm input",
    );
    let x2 = x1.clone();
    let beta2 = random_tensor(&mut r, [1, 5, 1, 1], -0.3, 0.3);
    let b2 = beta2.clone();
    check_single(
        random_tensor(&mut r, [1, 5, 1, 1], 0.5, 1.5),
        |t, g| {
            let x = t.lift(x2.clone());
            let b = t.lift(b2.clone());
            let y = t.layer_norm(&x, &g, &b, 1e-5)?;
            let sq = t.mul(&y, &y)?;
            t.sum_all(&sq)
        },
        |g| {
            let y = sfusion::tensor::layer_norm(&x1, g, &beta2, 1e-5)?;
            Ok(y.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "layer_norm gamma",
    );
}

#[test]
fn freq_filter_soft_gradients() {
    let mut r = rng(5);
    let x0 = random_tensor(&mut r, [1, 2, 6, 6], -1.0, 1.0);
    let lambda = Tensor::scalar(0.35);
    let lc = lambda.clone();
    let xc = x0.clone();
    check_single(
        x0,
        |t, x| {
            let l = t.lift(lc.clone());
            let y = t.freq_filter(&x, &l, MaskMode::Soft, 50.0)?;
            let sq = t.mul(&y, &y)?;
            t.sum_all(&sq)
        },
        |x| {
            let y = sfusion::ssd::freq_filter_forward(x, 0.35, MaskMode::Soft, 50.0)?;
            Ok(y.data().iter().map(|v| v * v).sum())
        },
        1e-5,
        "freq_filter input",
    );
    check_single(
        lambda,
        |t, l| {
            let x = t.lift(xc.clone());
            let y = t.freq_filter(&x, &l, MaskMode::Soft, 50.0)?;
            let sq = t.mul(&y, &y)?;
            t.sum_all(&sq)
        },
        |l| {
            let y =
                sfusion::ssd::freq_filter_forward(&xc, l.scalar_value()?, MaskMode::Soft, 50.0)?;
            Ok(y.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "freq_filter lambda",
    );
}

#[test]
fn scan2d_gradients_all_inputs() {
    let mut r = rng(6);
    let (cp, g, d, h, w) = (4usize, 2usize, 2usize, 4usize, 5usize);
    let x = random_tensor(&mut r, [1, cp, h, w], -1.0, 1.0);
    let a = random_tensor(&mut r, [1, cp, h, w], 0.05, 0.95);
    let b = random_tensor(&mut r, [1, g * d, h, w], -1.0, 1.0);
    let c = random_tensor(&mut r, [1, g * d, h, w], -1.0, 1.0);
    let all = [x.clone(), a.clone(), b.clone(), c.clone()];
    for (slot, name) in [(0, "X"), (1, "A"), (2, "B"), (3, "C")] {
        let fixed = all.clone();
        let fixed2 = all.clone();
        check_single(
            all[slot].clone(),
            move |t, p| {
                let mut vs: Vec<sfusion::autodiff::Var> =
                    fixed.iter().map(|v| t.lift(v.clone())).collect();
                vs[slot] = p;
                let y = t.scan2d(&vs[0], &vs[1], &vs[2], &vs[3], g, d, &ScanDir::ALL)?;
                let sq = t.mul(&y, &y)?;
                t.sum_all(&sq)
            },
            move |probe| {
                let mut vs = fixed2.clone();
                vs[slot] = probe.clone();
                let y = sfusion::ssd::scan2d_forward(&vs[0], &vs[1], &vs[2], &vs[3], g, d, &ScanDir::ALL)?;
                Ok(y.data().iter().map(|v| v * v).sum())
            },
            1e-6,
            name,
        );
    }
}

#[test]
fn outer_kernel_and_wavelet_vector_gradients() {
    let mut r = rng(7);
    let f = random_tensor(&mut r, [1, 2, 8, 8], -1.0, 1.0);
    let u0 = Tensor::from_vec([1, 1, 1, 2], vec![0.8, 0.6]).unwrap();
    let fc = f.clone();
    check_single(
        u0,
        |t, u| {
            let fv = t.lift(fc.clone());
            let k = t.outer_kernel(&u, &u, 2)?;
            let y = t.conv2d(&fv, &k, None, ConvSpec::new(2, 1, 2, 0))?;
            let sq = t.mul(&y, &y)?;
            t.sum_all(&sq)
        },
        |u| {
            let mut o = Eager;
            let k = o.outer_kernel(u, u, 2)?;
            let y = sfusion::tensor::conv2d(&f, &k, None, ConvSpec::new(2, 1, 2, 0))?;
            Ok(y.data().iter().map(|v| v * v).sum())
        },
        1e-6,
        "analysis vector",
    );
}

fn smooth_image(seed: u64, size: usize) -> Tensor {
    let mut r = rng(seed);
    let fx: f64 = r.gen_range(0.5..2.0);
    let fy: f64 = r.gen_range(0.5..2.0);
    Tensor::from_fn([1, 1, size, size], |_, _, i, j| {
        0.5 + 0.3
            * ((fx * i as f64 / size as f64 * std::f64::consts::TAU).sin()
                * (fy * j as f64 / size as f64 * std::f64::consts::TAU).cos())
    })
}

use rand::Rng;

#[test]
fn loss_gradients_wrt_fused_image() {
    let i1 = smooth_image(11, 16);
    let i2 = smooth_image(13, 16);
    let mut r = rng(17);
    let f0 = random_tensor(&mut r, [1, 1, 16, 16], 0.2, 0.8);

    let (a, b) = (i1.clone(), i2.clone());
    check_scaled(
        f0.clone(),
        |t, f| {
            let x = t.lift(a.clone());
            let y = t.lift(b.clone());
            loss_ssim(t, &f, &x, &y)
        },
        |f| {
            let mut o = Eager;
            Ok(loss_ssim(&mut o, f, &i1, &i2)?.scalar_value()?)
        },
        1e-4,
        1e-6,
        "loss_ssim",
    );

    let (a, b) = (i1.clone(), i2.clone());
    let (a2, b2) = (i1.clone(), i2.clone());
    check_scaled(
        f0.clone(),
        |t, f| {
            let x = t.lift(a.clone());
            let y = t.lift(b.clone());
            loss_text(t, &f, &x, &y)
        },
        |f| {
            let mut o = Eager;
            Ok(loss_text(&mut o, f, &a2, &b2)?.scalar_value()?)
        },
        1e-4,
        1e-6,
        "loss_text",
    );

    let (a, b) = (i1.clone(), i2.clone());
    let (a2, b2) = (i1.clone(), i2.clone());
    check_scaled(
        f0,
        |t, f| {
            let x = t.lift(a.clone());
            let y = t.lift(b.clone());
            loss_int(t, &f, &x, &y, Aggregate::Mean)
        },
        |f| {
            let mut o = Eager;
            Ok(loss_int(&mut o, f, &a2, &b2, Aggregate::Mean)?.scalar_value()?)
        },
        1e-4,
        1e-6,
        "loss_int",
    );
}

#[test]
fn full_block_parameter_gradients() {
    // Every parameter of one randomly initialized block, loss = sum(out^2).
    let mut r = rng(23);
    let dims = BlockDims {
        c_in: 4,
        c_prime: 8,
        groups: 1,
        state_dim: 2,
        mlp_hidden: 8,
        k_sharp: 50.0,
    };
    let mut ps = ParamSet::new();
    let ids = BlockIds::register(&mut ps, "blk", dims, &mut r, false);
    let l_in = random_tensor(&mut r, [1, 4, 4, 4], -1.0, 1.0);

    ps.zero_grad();
    let mut tape = Tape::new();
    let leaves = ids.load(&mut tape, &ps);
    let x = tape.lift(l_in.clone());
    let out = block_forward(&mut tape, &x, &leaves, dims, MaskMode::Soft).unwrap();
    let sq = tape.mul(&out, &out).unwrap();
    let loss = tape.sum_all(&sq).unwrap();
    tape.backward(loss, &mut ps).unwrap();

    let entries: Vec<_> = ps.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in entries {
        let value = ps.value(id).clone();
        let analytic = ps.grad(id).clone();
        let analytic = sfusion::tensor::scale(&analytic, 1e-5);
        let mut eval = |probe: &Tensor| -> Result<f64> {
            *ps.value_mut(id) = probe.clone();
            let mut o = Eager;
            let leaves = ids.load(&mut o, &ps);
            let out = block_forward(&mut o, &l_in, &leaves, dims, MaskMode::Soft)?;
            Ok(out.data().iter().map(|v| v * v).sum::<f64>() * 1e-5)
        };
        let err = finite_diff_check(&mut eval, &value, &analytic, 1e-4).unwrap();
        *ps.value_mut(id) = value;
        assert!(err < 1e-5, "block param {name}: rel err {err}");
    }
}

#[test]
fn end_to_end_micro_model_gradcheck() {
    let mut model = Model::init_random(FusionConfig::micro()).unwrap();
    let report = gradient_check(&mut model, 16, 1e-4).unwrap();
    assert!(
        report.worst_err < 1e-4,
        "worst {} at {}",
        report.worst_err,
        report.worst_param
    );
}

#[test]
fn training_loss_batch_gradient_matches_fd_spotcheck() {
    // Full pipeline loss on a 16x16 random pair; spot-check a few leaves
    // at tighter tolerance than the sweep.
    let mut model = Model::init_random(FusionConfig::micro()).unwrap();
    let i1 = smooth_image(31, 16);
    let i2 = smooth_image(37, 16);

    model.ps.zero_grad();
    let mut tape = Tape::new();
    let leaves = model.load(&mut tape);
    let a = tape.lift(i1.clone());
    let b = tape.lift(i2.clone());
    let fused =
        sfusion::pipeline::fuse_forward(&mut tape, &model, &leaves, &a, &b, MaskMode::Soft)
            .unwrap();
    let (loss, _) = total_loss(&mut tape, &fused, &a, &b, LossWeights::default(), Aggregate::Max)
        .unwrap();
    tape.backward(loss, &mut model.ps).unwrap();

    let picks: Vec<_> = model
        .ps
        .iter()
        .filter(|(_, p)| {
            ["stem.w", "wavelet.u0", "hi.0.lambda_raw", "deep.0.w_in.w", "head.out.w"]
                .contains(&p.name.as_str())
        })
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    assert_eq!(picks.len(), 5);
    for (id, name) in picks {
        let value = model.ps.value(id).clone();
        let analytic = model.ps.grad(id).clone();
        let analytic = sfusion::tensor::scale(&analytic, 1e-5);
        let mut eval = |probe: &Tensor| -> Result<f64> {
            *model.ps.value_mut(id) = probe.clone();
            let mut o = Eager;
            let leaves = model.load(&mut o);
            let fused = sfusion::pipeline::fuse_forward(&mut o, &model, &leaves, &i1, &i2, MaskMode::Soft)?;
            let (_, rep) = total_loss(&mut o, &fused, &i1, &i2, LossWeights::default(), Aggregate::Max)?;
            Ok(rep.l_total * 1e-5)
        };
        let err = finite_diff_check(&mut eval, &value, &analytic, 1e-4).unwrap();
        *model.ps.value_mut(id) = value;
        assert!(err < 1e-5, "{name}: rel err {err}");
    }
}
