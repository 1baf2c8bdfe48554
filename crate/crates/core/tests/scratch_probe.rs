// Temporary diagnostic: error scaling of FD vs analytic gradients.
mod common;

use common::*;
use sfusion::autodiff::{finite_diff_check, Eager, Ops, ParamSet, Tape};
use sfusion::error::Result;
use sfusion::losses::loss_ssim;
use sfusion::pipeline::{fuse_forward, FusionConfig, Model};
use sfusion::ssd::MaskMode;
use sfusion::losses::{total_loss, Aggregate, LossWeights};
use sfusion::tensor::Tensor;

#[test]
#[ignore]
fn probe_ssim_fd_scaling() {
    let i1 = Tensor::from_fn([1, 1, 16, 16], |_, _, i, j| {
        0.5 + 0.3 * ((i as f64 / 5.0).sin() * (j as f64 / 3.0).cos())
    });
    let i2 = i1.map(|v| 1.0 - 0.8 * v);
    let mut r = rng(17);
    let f0 = random_tensor(&mut r, [1, 1, 16, 16], 0.2, 0.8);

    let mut ps = ParamSet::new();
    let id = ps.register("f", f0.clone());
    let mut tape = Tape::new();
    let f = tape.load(&ps, id);
    let a = tape.lift(i1.clone());
    let b = tape.lift(i2.clone());
    let loss = loss_ssim(&mut tape, &f, &a, &b).unwrap();
    tape.backward(loss, &mut ps).unwrap();
    let analytic = ps.grad(id).clone();

    for h in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
        let mut eval = |probe: &Tensor| -> Result<f64> {
            let mut o = Eager;
            Ok(loss_ssim(&mut o, probe, &i1, &i2)?.scalar_value()?)
        };
        let err = finite_diff_check(&mut eval, &f0, &analytic, h).unwrap();
        println!("ssim grad: h={h:.0e} err={err:.3e}");
    }
}

#[test]
#[ignore]
fn probe_loss_parts() {
    use sfusion::losses::{loss_int, loss_ssim, loss_text};
    let mut model = Model::init_random(FusionConfig::micro()).unwrap();
    let (i1, i2) = sfusion::pipeline::gradcheck_inputs(16, model.cfg.seed.wrapping_add(1));

    for part in ["ssim", "text", "int"] {
        model.ps.zero_grad();
        let mut tape = Tape::new();
        let leaves = model.load(&mut tape);
        let a = tape.lift(i1.clone());
        let b = tape.lift(i2.clone());
        let fused = fuse_forward(&mut tape, &model, &leaves, &a, &b, MaskMode::Soft).unwrap();
        let loss = match part {
            "ssim" => loss_ssim(&mut tape, &fused, &a, &b).unwrap(),
            "text" => loss_text(&mut tape, &fused, &a, &b).unwrap(),
            _ => loss_int(&mut tape, &fused, &a, &b, Aggregate::Max).unwrap(),
        };
        tape.backward(loss, &mut model.ps).unwrap();
        for target in ["deep.0.w_in.w", "hi.0.w_in.w"] {
            let (id, _) = model.ps.iter().find(|(_, p)| p.name == target).map(|(id, p)| (id, p.name.clone())).unwrap();
            let value = model.ps.value(id).clone();
            let scaled = sfusion::tensor::scale(model.ps.grad(id), 1e-3);
            for h in [3e-4, 1e-4] {
                let mut eval = |probe: &Tensor| -> Result<f64> {
                    *model.ps.value_mut(id) = probe.clone();
                    let mut o = Eager;
                    let leaves = model.load(&mut o);
                    let fused = fuse_forward(&mut o, &model, &leaves, &i1, &i2, MaskMode::Soft)?;
                    let v = match part {
                        "ssim" => loss_ssim(&mut o, &fused, &i1, &i2)?.scalar_value()?,
                        "text" => loss_text(&mut o, &fused, &i1, &i2)?.scalar_value()?,
                        _ => loss_int(&mut o, &fused, &i1, &i2, Aggregate::Max)?.scalar_value()?,
                    };
                    Ok(v * 1e-3)
                };
                let err = finite_diff_check(&mut eval, &value, &scaled, h).unwrap();
                *model.ps.value_mut(id) = value.clone();
                println!("{part:>5} {target}: h={h:.0e} err={err:.3e}");
            }
        }
    }
}

#[test]
#[ignore]
fn probe_micro_worst_params() {
    let mut model = Model::init_random(FusionConfig::micro()).unwrap();
    let (i1, i2) = sfusion::pipeline::gradcheck_inputs(16, model.cfg.seed.wrapping_add(1));

    model.ps.zero_grad();
    let mut tape = Tape::new();
    let leaves = model.load(&mut tape);
    let a = tape.lift(i1.clone());
    let b = tape.lift(i2.clone());
    let fused = fuse_forward(&mut tape, &model, &leaves, &a, &b, MaskMode::Soft).unwrap();
    let (loss, _) =
        total_loss(&mut tape, &fused, &a, &b, LossWeights::default(), Aggregate::Max).unwrap();
    tape.backward(loss, &mut model.ps).unwrap();

    let names: Vec<String> = model.ps.iter().map(|(_, p)| p.name.clone()).collect();
    let _ = &names;
    for target in ["deep.0.w_se.w", "deep.0.w_in.w", "hi.0.w_in.w", "lo.0.w_out.w"] {
        let (id, _) = model
            .ps
            .iter()
            .find(|(_, p)| p.name == target)
            .map(|(id, p)| (id, p.name.clone()))
            .unwrap();
        let value = model.ps.value(id).clone();
        let analytic = model.ps.grad(id).clone();
        let scaled = sfusion::tensor::scale(&analytic, 1e-3);
        for h in [3e-4, 2e-4, 1e-4] {
            let mut eval = |probe: &Tensor| -> Result<f64> {
                *model.ps.value_mut(id) = probe.clone();
                let mut o = Eager;
                let leaves = model.load(&mut o);
                let fused = fuse_forward(&mut o, &model, &leaves, &i1, &i2, MaskMode::Soft)?;
                let (_, rep) =
                    total_loss(&mut o, &fused, &i1, &i2, LossWeights::default(), Aggregate::Max)?;
                Ok(rep.l_total * 1e-3)
            };
            let err = finite_diff_check(&mut eval, &value, &scaled, h).unwrap();
            *model.ps.value_mut(id) = value.clone();
            println!("{target}: h={h:.0e} err={err:.3e} |g|max={:.3e}", analytic.max_abs());
        }
    }
}
