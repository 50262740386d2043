use super::{labels, normal, rng, uniform};
use densefew::fewshot::losses::{cosine_ce, dense_loss, dense_proto_loss, gap_loss, proto_loss};
use densefew::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
use densefew::graph::{Graph, Var};
use densefew::rng::Rng;
use densefew::{Result, Tensor};

pub const INSTANCES: u64 = 20;

/// Fixed, sign-varying weights so every output entry reaches the loss.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n).map(|k| (1.37 * k as f64 + 0.4).sin() + 0.3).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn loss_of<F>(build: &F, inputs: &[Tensor], diff: &[usize]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), diff.contains(&i)))
        .collect();
    let out = build(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    Ok((g, vars, loss))
}

/// Worst relative error between backward and central differences over
/// the inputs listed in `diff`.
fn worst_error<F>(build: F, inputs: &[Tensor], diff: &[usize]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = loss_of(&build, inputs, diff).unwrap();
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for &i in diff {
        let auto = g.grad(vars[i]).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i] = x.clone();
                let (g, _, loss) = loss_of(&build, &probe, &[])?;
                Ok(g.value(loss).item())
            },
            &inputs[i],
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&auto, &numeric));
    }
    worst
}

fn check<G, F>(name: &'static str, seed: u64, mut case: G) -> (&'static str, f64)
where
    G: FnMut(&mut Rng) -> (Vec<Tensor>, Vec<usize>, F),
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for k in 0..INSTANCES {
        let mut r = rng(seed, k);
        let (inputs, diff, build) = case(&mut r);
        worst = worst.max(worst_error(build, &inputs, &diff));
    }
    (name, worst)
}

pub fn elementwise_binary() -> Vec<(&'static str, f64)> {
    vec![
        check("add", 1, |r| {
            let s = [3, 4];
            (
                vec![normal(r, &s), normal(r, &s)],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.add(v[0], v[1]),
            )
        }),
        check("sub", 2, |r| {
            let s = [2, 3, 2];
            (
                vec![normal(r, &s), normal(r, &s)],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]),
            )
        }),
        check("mul", 3, |r| {
            let s = [5];
            (
                vec![normal(r, &s), normal(r, &s)],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]),
            )
        }),
        check("scale", 4, |r| {
            (vec![normal(r, &[6])], vec![0], |g: &mut Graph, v: &[Var]| {
                Ok(g.scale(v[0], -1.7))
            })
        }),
        check("mul_scalar", 5, |r| {
            (
                vec![normal(r, &[2, 3]), normal(r, &[1])],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.mul_scalar(v[0], v[1]),
            )
        }),
    ]
}

pub fn matmul() -> Vec<(&'static str, f64)> {
    vec![
        check("matmul", 10, |r| {
            (
                vec![normal(r, &[3, 4]), normal(r, &[4, 5])],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1], false),
            )
        }),
        check("matmul_trans_b", 11, |r| {
            (
                vec![normal(r, &[3, 4]), normal(r, &[2, 4])],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1], true),
            )
        }),
    ]
}

pub fn conv2d() -> Vec<(&'static str, f64)> {
    vec![
        check("conv2d_3x3_same", 20, |r| {
            (
                vec![normal(r, &[2, 5, 5, 2]), normal(r, &[3, 3, 2, 3])],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], 1, 1),
            )
        }),
        check("conv2d_stride2_valid", 21, |r| {
            (
                vec![normal(r, &[1, 6, 5, 2]), normal(r, &[3, 3, 2, 2])],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], 2, 0),
            )
        }),
        check("conv2d_1x1", 22, |r| {
            (
                vec![normal(r, &[2, 3, 3, 3]), normal(r, &[1, 1, 3, 4])],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], 1, 0),
            )
        }),
    ]
}

pub fn pooling() -> Vec<(&'static str, f64)> {
    vec![
        check("max_pool2", 30, |r| {
            (vec![normal(r, &[2, 4, 6, 2])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.max_pool2(v[0])
            })
        }),
        check("global_avg_pool", 31, |r| {
            (vec![normal(r, &[2, 3, 3, 4])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.global_avg_pool(v[0])
            })
        }),
        check("global_max_pool", 32, |r| {
            (vec![normal(r, &[2, 3, 3, 4])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.global_max_pool(v[0])
            })
        }),
    ]
}

pub fn structural() -> Vec<(&'static str, f64)> {
    vec![
        check("concat", 40, |r| {
            (
                vec![normal(r, &[2, 2, 3]), normal(r, &[2, 2, 2])],
                vec![0, 1],
                |g: &mut Graph, v: &[Var]| g.concat(v[0], v[1]),
            )
        }),
        check("slice_last", 41, |r| {
            (vec![normal(r, &[3, 5])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.slice_last(v[0], 1, 4)
            })
        }),
        check("gather_rows", 42, |r| {
            (vec![normal(r, &[4, 3])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.gather_rows(v[0], &[2, 0, 2, 3])
            })
        }),
        check("reshape", 43, |r| {
            (vec![normal(r, &[2, 3, 2])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.reshape(v[0], &[3, 4])
            })
        }),
    ]
}

pub fn unary() -> Vec<(&'static str, f64)> {
    vec![
        check("sigmoid", 50, |r| {
            (vec![normal(r, &[7])], vec![0], |g: &mut Graph, v: &[Var]| {
                Ok(g.sigmoid(v[0]))
            })
        }),
        check("swish", 51, |r| {
            (vec![normal(r, &[7])], vec![0], |g: &mut Graph, v: &[Var]| {
                Ok(g.swish(v[0]))
            })
        }),
        check("exp", 52, |r| {
            (vec![normal(r, &[7])], vec![0], |g: &mut Graph, v: &[Var]| {
                Ok(g.exp(v[0]))
            })
        }),
        check("log", 53, |r| {
            (vec![uniform(r, &[7], 0.2, 3.0)], vec![0], |g: &mut Graph, v: &[Var]| {
                g.log(v[0])
            })
        }),
    ]
}

pub fn reductions_and_probabilities() -> Vec<(&'static str, f64)> {
    vec![
        check("sum", 60, |r| {
            (vec![normal(r, &[2, 4])], vec![0], |g: &mut Graph, v: &[Var]| {
                Ok(g.sum(v[0]))
            })
        }),
        check("mean", 61, |r| {
            (vec![normal(r, &[2, 4])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.mean(v[0])
            })
        }),
        check("softmax_rows", 62, |r| {
            (vec![normal(r, &[3, 4])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.softmax_rows(v[0])
            })
        }),
        check("cross_entropy", 63, |r| {
            let y = labels(r, 3, 4);
            (
                vec![uniform(r, &[3, 4], 0.05, 1.0)],
                vec![0],
                move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &y),
            )
        }),
        check("softmax_cross_entropy", 64, |r| {
            let y = labels(r, 3, 5);
            (vec![normal(r, &[3, 5])], vec![0], move |g: &mut Graph, v: &[Var]| {
                let p = g.softmax_rows(v[0])?;
                g.cross_entropy(p, &y)
            })
        }),
        check("normalize_rows", 65, |r| {
            (vec![normal(r, &[3, 4])], vec![0], |g: &mut Graph, v: &[Var]| {
                g.normalize_rows(v[0])
            })
        }),
    ]
}

pub fn batch_norm() -> Vec<(&'static str, f64)> {
    vec![
        check("batch_norm_train", 70, |r| {
            let x = normal(r, &[3, 2, 2, 3]);
            let gamma = uniform(r, &[3], 0.5, 1.5);
            let beta = normal(r, &[3]);
            (vec![x, gamma, beta], vec![0, 1, 2], |g: &mut Graph, v: &[Var]| {
                Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
            })
        }),
        check("batch_norm_eval", 71, |r| {
            let x = normal(r, &[2, 2, 2, 3]);
            let gamma = uniform(r, &[3], 0.5, 1.5);
            let beta = normal(r, &[3]);
            let mean = normal(r, &[3]).into_data();
            let var = uniform(r, &[3], 0.3, 2.0).into_data();
            (vec![x, gamma, beta], vec![0, 1, 2], move |g: &mut Graph, v: &[Var]| {
                g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
            })
        }),
    ]
}

pub fn three_layer_conv_graph() -> Vec<(&'static str, f64)> {
    vec![check("conv_bn_swish_x3", 80, |r| {
        let x = normal(r, &[2, 6, 6, 2]);
        let w1 = normal(r, &[3, 3, 2, 3]);
        let w2 = normal(r, &[3, 3, 3, 3]);
        let w3 = normal(r, &[1, 1, 3, 2]);
        let gamma = uniform(r, &[3], 0.5, 1.5);
        let beta = normal(r, &[3]);
        (
            vec![x, w1, w2, w3, gamma, beta],
            vec![0, 1, 2, 3, 4, 5],
            |g: &mut Graph, v: &[Var]| {
                let h = g.conv2d(v[0], v[1], 1, 1)?;
                let (h, _) = g.batch_norm_train(h, v[4], v[5], 1e-5)?;
                let h = g.swish(h);
                let h = g.conv2d(h, v[2], 1, 1)?;
                let h = g.max_pool2(h)?;
                let h = g.swish(h);
                g.conv2d(h, v[3], 1, 0)
            },
        )
    })]
}

pub fn classifier_costs() -> Vec<(&'static str, f64)> {
    vec![
        check("cosine_ce", 90, |r| {
            let y = labels(r, 4, 3);
            let tau = uniform(r, &[1], 1.0, 4.0);
            (
                vec![normal(r, &[4, 5]), normal(r, &[3, 5]), tau],
                vec![0, 1, 2],
                move |g: &mut Graph, v: &[Var]| cosine_ce(g, v[0], v[1], v[2], &y),
            )
        }),
        check("gap_loss", 91, |r| {
            let y = labels(r, 3, 4);
            let tau = uniform(r, &[1], 1.0, 4.0);
            (
                vec![normal(r, &[3, 2, 2, 4]), normal(r, &[4, 4]), tau],
                vec![0, 1, 2],
                move |g: &mut Graph, v: &[Var]| gap_loss(g, v[0], v[1], v[2], &y),
            )
        }),
        check("dense_loss", 92, |r| {
            let y = labels(r, 2, 3);
            let tau = uniform(r, &[1], 1.0, 4.0);
            (
                vec![normal(r, &[2, 3, 3, 4]), normal(r, &[3, 4]), tau],
                vec![0, 1, 2],
                move |g: &mut Graph, v: &[Var]| dense_loss(g, v[0], v[1], v[2], &y),
            )
        }),
    ]
}

/// Leave-one-out style subtask over a 3-way 2-shot support set.
fn episode(r: &mut Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::Rng as _;
    let labels = vec![0, 0, 1, 1, 2, 2];
    let q = r.random_range(0..labels.len());
    let support = (0..labels.len()).filter(|&i| i != q).collect();
    (labels, support, vec![q])
}

pub fn episodic_costs() -> Vec<(&'static str, f64)> {
    vec![
        check("proto_loss", 100, |r| {
            let (y, s, q) = episode(r);
            let tau = uniform(r, &[1], 1.0, 4.0);
            (
                vec![normal(r, &[6, 4]), tau],
                vec![0, 1],
                move |g: &mut Graph, v: &[Var]| proto_loss(g, v[0], &y, &s, &q, 3, v[1]),
            )
        }),
        check("dense_proto_loss", 101, |r| {
            let (y, s, q) = episode(r);
            let tau = uniform(r, &[1], 1.0, 4.0);
            (
                vec![normal(r, &[6, 2, 2, 3]), tau],
                vec![0, 1],
                move |g: &mut Graph, v: &[Var]| dense_proto_loss(g, v[0], &y, &s, &q, 3, v[1]),
            )
        }),
        check("implant_pooled_loss", 102, |r| {
            let (y, s, q) = episode(r);
            let base = normal(r, &[6, 2, 2, 3]);
            let tap = normal(r, &[6, 4, 4, 2]);
            let w = normal(r, &[3, 3, 2, 2]);
            let gamma = uniform(r, &[2], 0.5, 1.5);
            let beta = normal(r, &[2]);
            (
                vec![base, tap, w, gamma, beta],
                vec![2, 3, 4],
                move |g: &mut Graph, v: &[Var]| {
                    let h = g.conv2d(v[1], v[2], 1, 1)?;
                    let (h, _) = g.batch_norm_train(h, v[3], v[4], 1e-5)?;
                    let h = g.swish(h);
                    let h = g.max_pool2(h)?;
                    let maps = g.concat(v[0], h)?;
                    let pooled = g.global_avg_pool(maps)?;
                    let tau = g.constant(Tensor::scalar(10.0));
                    proto_loss(g, pooled, &y, &s, &q, 3, tau)
                },
            )
        }),
    ]
}

/// Every op group and composite loss.
pub fn all() -> Vec<(&'static str, f64)> {
    [
        elementwise_binary(),
        matmul(),
        conv2d(),
        pooling(),
        structural(),
        unary(),
        reductions_and_probabilities(),
        batch_norm(),
        three_layer_conv_graph(),
        classifier_costs(),
        episodic_costs(),
    ]
    .concat()
}
