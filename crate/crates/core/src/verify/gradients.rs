use super::SuiteReport;
use crate::attention::{
    kernel_rla_step, mla_direct, rla_base_step, rla_light_step, self_attention_ref, FeatureMap,
    LayerTriple, LightState,
};
use crate::blocks::{mrla_block_forward, AttnMode, BlockOptions, Carry, MrlaBlockParams, Variant};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{grad_check, DType, Tensor};

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

type ScalarMap = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// A scalar-valued map and the inputs it is differentiated at.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: ScalarMap,
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape, 1.0, DType::F64).expect("valid shape")
}

/// Entries with magnitude in `[0.1, 1.1]`, away from kinks at zero.
fn off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.uniform(0.1, 1.1);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(v, shape).expect("valid shape")
}

/// Random fixed weights turn any output into a scalar with a generic gradient.
fn weigh(out: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(out.reshape(w.shape())?.mul(w)?.sum())
}

fn case<F>(name: &'static str, inputs: Vec<Tensor>, out_shape: &[usize], rng: &mut Rng, f: F) -> GradCase
where
    F: Fn(&[Tensor]) -> Result<Tensor> + 'static,
{
    let w = normal(rng, out_shape);
    GradCase {
        name,
        inputs,
        f: Box::new(move |t| weigh(&f(t)?, &w)),
    }
}

fn block_case(name: &'static str, mode: AttnMode, variant: Variant, rng: &mut Rng) -> GradCase {
    let c = 4;
    let params = MrlaBlockParams::init(c, 2, mode, variant, BlockOptions::default(), rng, DType::F64)
        .expect("valid block");
    let x_shape: Vec<usize> = match variant {
        Variant::Cnn => vec![3, 3, c],
        Variant::Vit => vec![5, c],
    };
    let mut inputs = vec![
        normal(rng, &x_shape),
        normal(rng, &x_shape),
        params.conv_q.detach(),
        params.conv_k.detach(),
        params.w_v.as_ref().expect("value conv on").detach(),
    ];
    if let Some(l) = &params.lambda_o {
        // Away from 1 so the carry term is not a plain pass-through.
        let v: Vec<f64> = l.data().iter().map(|_| rng.uniform(0.3, 1.2)).collect();
        inputs.push(Tensor::from_vec(v, &[c]).expect("valid"));
    }
    let f = move |t: &[Tensor]| -> Result<Tensor> {
        let mut p = params.clone();
        p.conv_q = t[2].clone();
        p.conv_k = t[3].clone();
        p.w_v = Some(t[4].clone());
        if p.lambda_o.is_some() {
            p.lambda_o = Some(t[5].clone());
        }
        let first = mrla_block_forward(&p, &t[0], &Carry::Empty)?;
        let second = mrla_block_forward(&p, &t[1], &first.carry)?;
        first.o.add(&second.o)
    };
    case(name, inputs, &x_shape, rng, f)
}

/// Every differentiable primitive, the attention forms and the four block
/// configurations, with inputs drawn from `seed`.
pub fn gradient_checks(seed: u64) -> Vec<GradCase> {
    let mut r = Rng::new(seed ^ 0x6772_6164);
    let rng = &mut r;
    let mut cases = Vec::new();
    macro_rules! push {
        ($name:expr, [$($shape:expr),*], $out:expr, $f:expr) => {{
            let inputs = vec![$(normal(rng, &$shape)),*];
            cases.push(case($name, inputs, &$out, rng, $f));
        }};
    }
    push!("add", [[2, 3], [2, 3]], [2, 3], |t: &[Tensor]| t[0].add(&t[1]));
    push!("sub", [[2, 3], [2, 3]], [2, 3], |t: &[Tensor]| t[0].sub(&t[1]));
    push!("mul", [[2, 3], [2, 3]], [2, 3], |t: &[Tensor]| t[0].mul(&t[1]));
    push!("scale", [[4]], [4], |t: &[Tensor]| Ok(t[0].scale(-1.7)));
    push!("neg", [[4]], [4], |t: &[Tensor]| Ok(t[0].neg()));
    push!("exp", [[4]], [4], |t: &[Tensor]| Ok(t[0].exp()));
    push!("sum", [[2, 3]], [1], |t: &[Tensor]| Ok(t[0].sum()));
    push!("mean", [[2, 3]], [1], |t: &[Tensor]| Ok(t[0].mean()));
    push!("add_n", [[3], [3], [3]], [3], |t: &[Tensor]| Tensor::add_n(t));
    push!("matmul", [[2, 3], [3, 4]], [2, 4], |t: &[Tensor]| t[0].matmul(&t[1]));
    push!("transpose", [[2, 3]], [3, 2], |t: &[Tensor]| t[0].transpose());
    push!("reshape", [[2, 3]], [3, 2], |t: &[Tensor]| t[0].reshape(&[3, 2]));
    push!("narrow", [[3, 4]], [3, 2], |t: &[Tensor]| t[0].narrow(1, 1, 2));
    push!("concat", [[2, 3], [2, 1]], [2, 4], |t: &[Tensor]| Tensor::concat(t, 1));
    push!("mul_channels", [[2, 2, 3], [3]], [2, 2, 3], |t: &[Tensor]| t[0].mul_channels(&t[1]));
    push!("add_channels", [[2, 2, 3], [3]], [2, 2, 3], |t: &[Tensor]| t[0].add_channels(&t[1]));
    push!("mul_scalar", [[2, 3], [1]], [2, 3], |t: &[Tensor]| t[0].mul_scalar(&t[1]));
    push!("segment_sum", [[8]], [2], |t: &[Tensor]| t[0].segment_sum(2));
    push!("repeat_each", [[3]], [6], |t: &[Tensor]| t[0].repeat_each(2));
    push!("softmax_rows", [[2, 4]], [2, 4], |t: &[Tensor]| Ok(t[0].softmax_rows()));
    push!("cross_entropy", [[5]], [1], |t: &[Tensor]| t[0].cross_entropy(2));
    push!("dot", [[4], [4]], [1], |t: &[Tensor]| t[0].dot(&t[1]));
    push!("sigmoid", [[5]], [5], |t: &[Tensor]| Ok(t[0].sigmoid()));
    push!("gelu", [[5]], [5], |t: &[Tensor]| Ok(t[0].gelu()));
    push!("conv1d_same", [[6], [3]], [6], |t: &[Tensor]| t[0].conv1d_same(&t[1]));
    push!("dwconv3x3_same", [[4, 3, 2], [3, 3, 2]], [4, 3, 2], |t: &[Tensor]| t[0]
        .dwconv3x3_same(&t[1]));
    push!("conv3x3_same", [[3, 4, 2], [3, 3, 2, 3]], [3, 4, 3], |t: &[Tensor]| t[0]
        .conv3x3_same(&t[1]));
    push!("gap", [[3, 2, 4]], [4], |t: &[Tensor]| t[0].gap());
    push!("avg_pool2d", [[4, 4, 2]], [2, 2, 2], |t: &[Tensor]| t[0].avg_pool2d(2));

    let x = off_zero(rng, &[6]);
    cases.push(case("relu", vec![x], &[6], rng, |t| Ok(t[0].relu())));
    let x = off_zero(rng, &[6]);
    cases.push(case("elu_plus_one", vec![x], &[6], rng, |t| Ok(t[0].elu_plus_one())));
    let x: Vec<f64> = (0..4).map(|_| rng.uniform(0.5, 2.0)).collect();
    let x = Tensor::from_vec(x, &[4]).expect("valid");
    cases.push(case("recip", vec![x], &[4], rng, |t| Ok(t[0].recip())));

    push!("self_attention_ref", [[3, 4], [4, 2], [4, 2], [4, 3]], [3, 3], |t: &[Tensor]| {
        self_attention_ref(&t[0], &t[1], &t[2], &t[3])
    });
    // Three layers: q, k of width 2 and v of width 3 per layer.
    let tri = |t: &[Tensor], i: usize| LayerTriple::new(t[3 * i].clone(), t[3 * i + 1].clone(), t[3 * i + 2].clone());
    push!("mla_direct", [[1, 2], [1, 2], [1, 3], [1, 2], [1, 2], [1, 3], [1, 2], [1, 2], [1, 3]], [1, 3],
        move |t: &[Tensor]| mla_direct(&[tri(t, 0)?, tri(t, 1)?, tri(t, 2)?]));
    push!("rla_base_step", [[1, 2], [1, 2], [1, 3], [1, 2], [1, 2], [1, 3], [1, 2], [1, 2], [1, 3]], [1, 3],
        move |t: &[Tensor]| {
            let (_, s) = rla_base_step(None, &tri(t, 0)?)?;
            let (_, s) = rla_base_step(Some(&s), &tri(t, 1)?)?;
            Ok(rla_base_step(Some(&s), &tri(t, 2)?)?.0)
        });
    push!("rla_light_step", [[1, 2], [1, 2], [1, 3], [1, 2], [1, 2], [1, 3], [1, 3]], [1, 3],
        move |t: &[Tensor]| {
            let o1 = rla_light_step(None, &tri(t, 0)?)?;
            rla_light_step(Some(&LightState::new(o1, t[6].clone())?), &tri(t, 1)?)
        });
    push!("kernel_rla_step", [[1, 2], [1, 2], [1, 3], [1, 2], [1, 2], [1, 3]], [1, 3],
        move |t: &[Tensor]| {
            let (_, s) = kernel_rla_step(None, &tri(t, 0)?, FeatureMap::EluPlusOne)?;
            Ok(kernel_rla_step(Some(&s), &tri(t, 1)?, FeatureMap::EluPlusOne)?.0)
        });

    cases.push(block_case("block_cnn_base", AttnMode::Base, Variant::Cnn, rng));
    cases.push(block_case("block_cnn_light", AttnMode::Light, Variant::Cnn, rng));
    cases.push(block_case("block_vit_base", AttnMode::Base, Variant::Vit, rng));
    cases.push(block_case("block_vit_light", AttnMode::Light, Variant::Vit, rng));
    cases
}

/// Finite-difference checks of [`gradient_checks`] for seeds `0..seeds`
/// (f64, eps 1e-6, relative tolerance 1e-4).
pub fn gradient_suite(seeds: u64) -> SuiteReport {
    let mut report = SuiteReport::new("gradients");
    for seed in 0..seeds {
        for c in gradient_checks(seed) {
            let dims = c
                .inputs
                .iter()
                .map(|t| format!("{:?}", t.shape()))
                .collect::<Vec<_>>()
                .join(" ");
            let result = match grad_check(&c.f, &c.inputs, EPS, TOL) {
                Ok(r) if r.non_finite => Err("non-finite gradient".to_string()),
                Ok(r) => Ok(r.max_rel_err),
                Err(e) => Err(e.to_string()),
            };
            report.record(c.name, seed, &dims, result, TOL);
        }
    }
    report
}
