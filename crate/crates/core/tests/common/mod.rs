//! Finite-difference gradient suite shared by the gradient tests and the acceptance run.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vssmseg_core::gradcheck::{check, project, uniform, GradReport, Selection};
use vssmseg_core::layers::{Bound, ParamStore};
use vssmseg_core::loss::{bce_dice_loss, multi_head_loss, LossWeights};
use vssmseg_core::sdi::{Cbam, Sdi};
use vssmseg_core::ss2d::{refold, unfold, ScanDirection, Ss2d};
use vssmseg_core::ssm::{selective_scan_core, SelectiveScan};
use vssmseg_core::tensor::Conv2dSpec;
use vssmseg_core::vss::VssBlock;
use vssmseg_core::{ModelConfig, Result, Tape, Tensor, Var, VmUnet};

pub const OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;

pub struct Case {
    pub name: String,
    pub tol: f64,
    pub report: Result<GradReport>,
}

impl Case {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.max_rel_err < self.tol && r.checked > 0)
    }
}

/// Uniform values pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, seed).map(|v| if v.abs() < gap { v + 2.0 * gap * v.signum() } else { v })
}

fn op<F>(cases: &mut Vec<Case>, name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    cases.push(Case { name: name.to_string(), tol: OP_TOL, report: check(inputs, Selection::All, f) });
}

/// Module check: input `x` followed by every parameter of `store`.
fn module<F>(cases: &mut Vec<Case>, name: &str, x: Tensor<f64>, store: &ParamStore<f64>, f: F)
where
    F: for<'t> Fn(&Bound<'t, f64>, &Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut inputs = vec![x];
    inputs.extend(store.values().iter().cloned());
    let report = check(&inputs, Selection::All, |_, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        project(&f(&p, &v[0])?, 17)
    });
    cases.push(Case { name: name.to_string(), tol: OP_TOL, report });
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every differentiable tape op plus the composite layers, at `1e-5`.
pub fn op_suite() -> Vec<Case> {
    let mut c = Vec::new();
    let a = uniform(&[2, 3], -1.0, 1.0, 1);
    let b = uniform(&[3], -1.0, 1.0, 2);
    let pos = uniform(&[2, 3], 0.5, 2.0, 3);
    op(&mut c, "add (broadcast)", &[a.clone(), b.clone()], |_, v| project(&v[0].add(&v[1])?, 1));
    op(&mut c, "sub (broadcast)", &[a.clone(), b.clone()], |_, v| project(&v[0].sub(&v[1])?, 2));
    op(&mut c, "mul (broadcast)", &[a.clone(), b.clone()], |_, v| project(&v[0].mul(&v[1])?, 3));
    op(&mut c, "div", &[a.clone(), pos.clone()], |_, v| project(&v[0].div(&v[1])?, 4));
    op(&mut c, "scale", &[a.clone()], |_, v| project(&v[0].scale(-1.7), 5));
    op(&mut c, "add_scalar", &[a.clone()], |_, v| project(&v[0].add_scalar(0.3), 6));
    op(&mut c, "neg", &[a.clone()], |_, v| project(&v[0].neg(), 7));
    op(&mut c, "exp", &[a.clone()], |_, v| project(&v[0].exp(), 8));
    op(&mut c, "ln", &[pos.clone()], |_, v| project(&v[0].ln(), 9));
    op(&mut c, "sigmoid", &[a.scale(3.0)], |_, v| project(&v[0].sigmoid(), 10));
    op(&mut c, "silu", &[a.scale(3.0)], |_, v| project(&v[0].silu(), 11));
    op(&mut c, "softplus", &[a.scale(3.0)], |_, v| project(&v[0].softplus(), 12));
    op(&mut c, "relu", &[away_from_zero(&[2, 3], 13, 0.05)], |_, v| project(&v[0].relu(), 13));
    op(&mut c, "clamp", &[uniform(&[4, 4], -2.0, 2.0, 14)], |_, v| project(&v[0].clamp(-1.0, 1.0), 14));
    op(&mut c, "sum_all", &[a.clone()], |_, v| Ok(v[0].sum_all().scale(0.5)));
    op(&mut c, "mean_all", &[a.clone()], |_, v| Ok(v[0].mean_all()));
    let t3 = uniform(&[2, 3, 4], -1.0, 1.0, 15);
    op(&mut c, "sum_axis", &[t3.clone()], |_, v| project(&v[0].sum_axis(1, false)?, 15));
    op(&mut c, "mean_axis", &[t3.clone()], |_, v| project(&v[0].mean_axis(2, true)?, 16));
    op(&mut c, "max_axis", &[t3.clone()], |_, v| project(&v[0].max_axis(1, true)?, 17));
    op(&mut c, "reshape", &[t3.clone()], |_, v| project(&v[0].reshape(vec![6, 4])?, 18));
    op(&mut c, "permute", &[t3.clone()], |_, v| project(&v[0].permute(&[2, 0, 1])?, 19));
    op(&mut c, "narrow", &[t3.clone()], |_, v| project(&v[0].narrow(2, 1, 2)?, 20));
    op(&mut c, "concat", &[t3.clone(), uniform(&[2, 1, 4], -1.0, 1.0, 21)], |_, v| {
        project(&Var::concat(&[&v[0], &v[1]], 1)?, 21)
    });
    op(&mut c, "linear", &[t3.clone(), uniform(&[4, 5], -1.0, 1.0, 22), uniform(&[5], -1.0, 1.0, 23)], |_, v| {
        project(&v[0].linear(&v[1], Some(&v[2]))?, 22)
    });
    let img = uniform(&[2, 4, 6, 6], -1.0, 1.0, 24);
    op(&mut c, "conv2d 3x3 same", &[img.clone(), uniform(&[3, 4, 3, 3], -0.5, 0.5, 25), uniform(&[3], -1.0, 1.0, 26)], |_, v| {
        project(&v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::same(3))?, 23)
    });
    op(&mut c, "conv2d 2x2 stride 2", &[img.clone(), uniform(&[5, 4, 2, 2], -0.5, 0.5, 27)], |_, v| {
        project(&v[0].conv2d(&v[1], None, Conv2dSpec::strided(2))?, 24)
    });
    op(&mut c, "conv2d depthwise", &[img.clone(), uniform(&[4, 1, 3, 3], -0.5, 0.5, 28)], |_, v| {
        project(&v[0].conv2d(&v[1], None, Conv2dSpec::same(3).with_groups(4))?, 25)
    });
    op(&mut c, "layer_norm", &[t3.clone(), uniform(&[4], 0.5, 1.5, 29), uniform(&[4], -0.5, 0.5, 30)], |_, v| {
        project(&v[0].layer_norm(&v[1], &v[2], 1e-5)?, 26)
    });
    op(&mut c, "bilinear_resize up", &[uniform(&[1, 2, 3, 4], -1.0, 1.0, 31)], |_, v| {
        project(&v[0].bilinear_resize(6, 8)?, 27)
    });
    op(&mut c, "bilinear_resize down", &[uniform(&[1, 2, 8, 8], -1.0, 1.0, 32)], |_, v| {
        project(&v[0].bilinear_resize(3, 5)?, 28)
    });
    op(&mut c, "adaptive_avg_pool2d", &[uniform(&[1, 2, 8, 6], -1.0, 1.0, 33)], |_, v| {
        project(&v[0].adaptive_avg_pool2d(3, 2)?, 29)
    });
    for (k, d) in ScanDirection::ALL.into_iter().enumerate() {
        op(&mut c, &format!("unfold/refold {d}"), &[uniform(&[1, 2, 3, 4], -1.0, 1.0, 34)], move |_, v| {
            let u = unfold(&v[0], d)?;
            let y = u.mul(&u)?;
            project(&refold(&y, d, 3, 4)?, 30 + k as u64)
        });
    }
    let (bs, l, dch, n) = (2, 5, 3, 2);
    op(
        &mut c,
        "selective_scan_core",
        &[
            uniform(&[bs, l, dch], -1.0, 1.0, 40),
            uniform(&[bs, l, dch], 0.05, 0.8, 41),
            uniform(&[dch, n], -2.0, -0.2, 42),
            uniform(&[bs, l, n], -1.0, 1.0, 43),
            uniform(&[bs, l, n], -1.0, 1.0, 44),
            uniform(&[dch], -1.0, 1.0, 45),
        ],
        |_, v| project(&selective_scan_core(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?, 40),
    );

    let mut s = ParamStore::new();
    let scan = SelectiveScan::new(&mut s, "scan", 3, 2, 1, &mut rng(1)).unwrap();
    module(&mut c, "selective scan layer", uniform(&[2, 4, 3], -1.0, 1.0, 50), &s, |p, x| scan.forward(p, x));

    let mut s = ParamStore::new();
    let ss2d = Ss2d::new(&mut s, "ss2d", 2, 2, 1, &mut rng(2)).unwrap();
    module(&mut c, "ss2d_forward", uniform(&[1, 2, 3, 3], -1.0, 1.0, 51), &s, |p, x| ss2d.forward(p, x));

    let mut s = ParamStore::new();
    let block = VssBlock::new(&mut s, "vss", 4, 4, 2, &mut rng(3)).unwrap();
    module(&mut c, "vss_forward", uniform(&[1, 4, 4, 4], -1.0, 1.0, 52), &s, |p, x| block.forward(p, x));

    let mut s = ParamStore::new();
    let cbam = Cbam::new(&mut s, "cbam", 4, &mut rng(4)).unwrap();
    module(&mut c, "cbam", uniform(&[1, 4, 5, 5], -1.0, 1.0, 53), &s, |p, x| cbam.forward(p, x));

    let mut s = ParamStore::new();
    let chans = [2usize, 3, 4, 5];
    let sdi = Sdi::new(&mut s, "sdi", &chans, 2, &mut rng(5)).unwrap();
    let mut inputs: Vec<Tensor<f64>> =
        (0..4).map(|i| uniform(&[1, chans[i], 8 >> i, 8 >> i], -1.0, 1.0, 60 + i as u64)).collect();
    let n_levels = inputs.len();
    inputs.extend(s.values().iter().cloned());
    let report = check(&inputs, Selection::All, |_, v| {
        let p = Bound::from_vars(v[n_levels..].to_vec());
        let out = sdi.forward(&p, &v[..n_levels])?;
        let mut acc = project(&out[0], 70)?;
        for (k, o) in out.iter().enumerate().skip(1) {
            acc = acc.add(&project(o, 70 + k as u64)?)?;
        }
        Ok(acc)
    });
    c.push(Case { name: "sdi_forward".into(), tol: OP_TOL, report });

    let y = uniform(&[2, 1, 3, 3], 0.0, 1.0, 80).map(|v| (v > 0.5) as u8 as f64);
    op(&mut c, "bce_dice_loss", &[uniform(&[2, 1, 3, 3], -2.0, 2.0, 81)], move |_, v| {
        bce_dice_loss(&v[0], &y, LossWeights::default())
    });
    c
}

fn micro_loss<'t>(
    model: &VmUnet<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    tape: &'t Tape<f64>,
    v: &[Var<'t, f64>],
) -> Result<Var<'t, f64>> {
    let p = Bound::from_vars(v.to_vec());
    let heads = model.forward(&p, &tape.constant(x.clone()))?;
    multi_head_loss(&heads, y, LossWeights::default())
}

/// Ten parameter tensors of the micro model, spread over encoder, fusion, decoder and heads,
/// checked through the full forward and the deep-supervised loss at `1e-4`. Within each tensor
/// the element with the largest analytic gradient is perturbed, which keeps every checked
/// derivative well above the central-difference noise floor (about 1e-11 here).
pub fn end_to_end_case() -> Case {
    let model = VmUnet::<f64>::new(ModelConfig::micro(), 11).unwrap();
    let x = uniform(&[1, 3, 32, 32], 0.0, 1.0, 90);
    let y = Tensor::from_fn(vec![1, 1, 32, 32], |i| {
        let (r, c) = ((i / 32) as isize - 16, (i % 32) as isize - 16);
        (r * r + c * c < 64) as u8 as f64
    });
    let analytic = {
        let tape = Tape::new();
        let p = model.params.leaves(&tape);
        let l = micro_loss(&model, &x, &y, &tape, p.vars()).unwrap();
        p.gradients(&tape.backward(&l).unwrap())
    };
    let names = [
        "encoder.stage0.embed.weight",
        "encoder.stage1.block0.dwconv.weight",
        "encoder.stage1.block0.ss2d.dir3.d_skip",
        "encoder.stage2.norm.gamma",
        "encoder.stage2.block0.in_proj.weight",
        "sdi.level1.cbam.fc2.bias",
        "sdi.level2.cbam.spatial.weight",
        "sdi.smooth12.weight",
        "decoder.up1.weight",
        "head.aux.weight",
    ];
    let elems: Vec<(usize, usize)> = names
        .iter()
        .map(|n| {
            let id = model.params.id(n).unwrap_or_else(|| panic!("no parameter {n}"));
            let idx = model.params.ids().position(|i| i == id).unwrap();
            let g = analytic[idx].data();
            let e = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
            (idx, e)
        })
        .collect();
    let report = check(model.params.values(), Selection::Elements(&elems), |tape, v| micro_loss(&model, &x, &y, tape, v));
    Case { name: "end-to-end micro model (10 parameters)".into(), tol: END_TO_END_TOL, report }
}
