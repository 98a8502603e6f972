use icafusion::cfe::{cfe_forward_on, CfeParams};
use icafusion::dmff::{DmffConfig, FusionMode};
use icafusion::gradcheck::{check_parameters, grad_check, GradCheckOptions, GradCheckReport};
use icafusion::icfe::{icfe_forward_on, stacked_forward_on, CfeBranches, IcfeParams, StackedParams, UpdateOrder};
use icafusion::ops::PoolKind;
use icafusion::sfs::ShrinkVariant;
use icafusion::{Graph, ParamKind, Parameters, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Loose tensors addressed by name.
struct Named(Vec<(String, Tensor<f64>)>);

impl Parameters<f64> for Named {
    fn visit(&self, _: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<f64>)) {
        for (n, t) in &self.0 {
            f(n, ParamKind::Weight, t);
        }
    }

    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<f64>)) {
        for (n, t) in &mut self.0 {
            f(n, ParamKind::Weight, t);
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_pass(report: &GradCheckReport) {
    assert!(report.passed(), "{}", report.to_text());
}

/// Checks `build` over named inputs, reduced by a fixed random weighting.
fn check_op(
    inputs: &[(&str, &[usize])],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) {
    let mut r = rng(7);
    let mut params = Named(
        inputs
            .iter()
            .map(|(n, s)| (n.to_string(), Tensor::uniform(s, 1.0, &mut r)))
            .collect(),
    );
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.0.iter().map(|(n, t)| g.param(n, t).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let weights = Tensor::uniform(&probe, 1.0, &mut r);
    let loss = |g: &mut Graph<f64>, p: &Named| -> Result<Var> {
        let vars = p
            .0
            .iter()
            .map(|(n, t)| g.param(n, t))
            .collect::<Result<Vec<_>>>()?;
        let out = build(g, &vars)?;
        g.weighted_sum(out, weights.clone())
    };
    let report = check_parameters(&mut params, loss, &GradCheckOptions::default(), |_| {}).unwrap();
    assert_pass(&report);
}

#[test]
fn matmul_variants() {
    check_op(&[("a", &[3, 4]), ("b", &[4, 2])], |g, v| g.matmul(v[0], v[1]));
    check_op(&[("a", &[3, 4]), ("b", &[5, 4])], |g, v| g.matmul_nt(v[0], v[1]));
}

#[test]
fn elementwise_ops() {
    check_op(&[("a", &[2, 3]), ("b", &[2, 3])], |g, v| g.add(v[0], v[1]));
    check_op(&[("x", &[4, 3]), ("b", &[3])], |g, v| g.add_bias(v[0], v[1]));
    check_op(&[("x", &[2, 3]), ("k", &[1])], |g, v| g.scale_by(v[0], v[1]));
    check_op(&[("x", &[1])], |g, v| Ok(g.one_minus(v[0])));
    check_op(&[("x", &[2, 5])], |g, v| Ok(g.sigmoid(v[0])));
    check_op(&[("x", &[3, 7])], |g, v| Ok(g.relu(v[0])));
}

#[test]
fn softmax_rows() {
    check_op(&[("x", &[3, 5])], |g, v| g.softmax_rows(v[0]));
}

#[test]
fn pooling_and_resizing() {
    check_op(&[("x", &[4, 6, 2])], |g, v| g.pool2d(v[0], 2, PoolKind::Avg));
    check_op(&[("x", &[4, 6, 2])], |g, v| g.pool2d(v[0], 2, PoolKind::Max));
    check_op(&[("x", &[3, 2, 2])], |g, v| g.bilinear_resize(v[0], 7, 5));
    check_op(&[("x", &[4, 4, 3])], |g, v| g.space_to_depth(v[0], 2));
}

#[test]
fn structural_ops() {
    check_op(&[("x", &[3, 6])], |g, v| g.slice_cols(v[0], 2, 3));
    check_op(&[("a", &[3, 2]), ("b", &[3, 4])], |g, v| g.concat_cols(&[v[0], v[1]]));
    check_op(&[("a", &[2, 3]), ("b", &[4, 3])], |g, v| g.concat_rows(&[v[0], v[1]]));
    check_op(&[("x", &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
    check_op(&[("x", &[2, 3])], |g, v| {
        let target = Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 0.0, 0.5, -0.6])?;
        g.mse(v[0], target)
    });
}

#[test]
fn single_cfe_module() {
    let mut r = rng(11);
    let mut p = CfeParams::<f64>::random(8, 16, 2, &mut r).unwrap();
    let target = Tensor::uniform(&[5, 8], 1.0, &mut r);
    let aux = Tensor::uniform(&[5, 8], 1.0, &mut r);
    let weights = Tensor::uniform(&[5, 8], 1.0, &mut r);
    let loss = |g: &mut Graph<f64>, p: &CfeParams<f64>| -> Result<Var> {
        let vars = p.bind(g, "")?;
        let t = g.input(target.clone());
        let a = g.input(aux.clone());
        let out = cfe_forward_on(g, t, a, &vars)?;
        g.weighted_sum(out, weights.clone())
    };
    assert_pass(&check_parameters(&mut p, loss, &GradCheckOptions::default(), |_| {}).unwrap());
}

fn token_pair(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    (
        Tensor::uniform(&[4, 4], 1.0, r),
        Tensor::uniform(&[4, 4], 1.0, r),
        Tensor::uniform(&[8, 4], 1.0, r),
    )
}

#[test]
fn shared_iterated_block_accumulates_gradients() {
    let mut r = rng(12);
    for update in [UpdateOrder::Synchronous, UpdateOrder::Sequential] {
        let mut p = IcfeParams::new(
            CfeBranches::Shared(CfeParams::<f64>::random(4, 8, 2, &mut r).unwrap()),
            3,
        );
        p.update = update;
        let (t_r, t_t, w) = token_pair(&mut r);
        let loss = |g: &mut Graph<f64>, p: &IcfeParams<f64>| -> Result<Var> {
            let a = g.input(t_r.clone());
            let b = g.input(t_t.clone());
            let (x, y) = icfe_forward_on(g, a, b, p, "")?;
            let both = g.concat_rows(&[x, y])?;
            g.weighted_sum(both, w.clone())
        };
        assert_pass(&check_parameters(&mut p, loss, &GradCheckOptions::default(), |_| {}).unwrap());
    }
}

#[test]
fn stacked_blocks() {
    let mut r = rng(13);
    let blocks = (0..2)
        .map(|_| {
            (
                CfeParams::<f64>::random(4, 8, 2, &mut r).unwrap(),
                CfeParams::<f64>::random(4, 8, 2, &mut r).unwrap(),
            )
        })
        .collect();
    let mut p = StackedParams::new(blocks);
    let (t_r, t_t, w) = token_pair(&mut r);
    let loss = |g: &mut Graph<f64>, p: &StackedParams<f64>| -> Result<Var> {
        let a = g.input(t_r.clone());
        let b = g.input(t_t.clone());
        let (x, y) = stacked_forward_on(g, a, b, p, "")?;
        let both = g.concat_rows(&[x, y])?;
        g.weighted_sum(both, w.clone())
    };
    let report = check_parameters(&mut p, loss, &GradCheckOptions::default(), |_| {}).unwrap();
    assert!(report.tensors.iter().any(|t| t.name == "blocks.1.cfe_t.w_q"));
    assert_pass(&report);
}

#[test]
fn pipeline_variants() {
    let base = DmffConfig {
        height: 4,
        width: 4,
        channels: 4,
        heads: 2,
        ffn_hidden: 8,
        ..Default::default()
    };
    let variants = [
        DmffConfig {
            shrink_variant: ShrinkVariant::Conv,
            ..base.clone()
        },
        DmffConfig {
            iterations: 3,
            mode: FusionMode::C,
            ..base.clone()
        },
        DmffConfig {
            iterations: 2,
            update_order: UpdateOrder::Sequential,
            ..base.clone()
        },
        DmffConfig {
            shrink_window: 1,
            ..base.clone()
        },
    ];
    for cfg in variants {
        assert_pass(&grad_check(&cfg, &GradCheckOptions::default()).unwrap());
    }
}
