//! Central-finite-difference gradient verification.

use super::{Array, Bindings, GradError, Graph};
use std::collections::BTreeMap;

/// Compare the graph's analytic gradients against central finite
/// differences at `point`, returning the maximum relative error
/// `|analytic - fd| / max(1, |analytic|)` over every coordinate of every
/// input. The graph must expose exactly one output and it must be scalar.
/// Non-finite discrepancies are reported as infinity.
pub fn finite_diff_check(
    graph: &Graph,
    point: &BTreeMap<String, Array>,
    step: f64,
) -> Result<f64, GradError> {
    assert!(step > 0.0, "step must be positive");
    let outputs: Vec<&str> = graph.output_names().collect();
    if outputs.len() != 1 {
        return Err(GradError::Invalid(format!(
            "finite_diff_check expects exactly one output, found {}",
            outputs.len()
        )));
    }
    let out_name = outputs[0];

    let eval_at = |vals: &BTreeMap<String, Array>| -> Result<f64, GradError> {
        let mut b = Bindings::new();
        b.bind_all(vals.iter());
        let ev = graph.forward(&b)?;
        let out = ev.output(out_name)?;
        if !out.is_scalar() {
            return Err(GradError::NonScalarSeed(out_name.to_string()));
        }
        Ok(out.scalar_value())
    };

    let mut b = Bindings::new();
    b.bind_all(point.iter());
    let ev = graph.forward(&b)?;
    let grads = ev.backward(out_name)?;

    let mut max_err: f64 = 0.0;
    let mut probe = point.clone();
    for (name, base) in point {
        let analytic = grads.get(name).cloned();
        for i in 0..base.len() {
            let x0 = base.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x0 + step;
            let plus = eval_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x0 - step;
            let minus = eval_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x0;

            let fd = (plus - minus) / (2.0 * step);
            let an = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            let err = (an - fd).abs() / an.abs().max(1.0);
            let err = if err.is_finite() { err } else { f64::INFINITY };
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::super::{GraphBuilder, NodeId, Rng};
    use super::*;

    fn point_of(entries: Vec<(&str, Array)>) -> BTreeMap<String, Array> {
        entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    #[test]
    fn linear_map_is_exact() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[3]);
        let scaled = gb.scale(x, 2.5);
        let s = gb.sum(scaled);
        gb.output("out", s);
        let graph = gb.finish();
        let p = point_of(vec![("x", Array::vector(vec![0.4, -1.0, 2.0]))]);
        let err = finite_diff_check(&graph, &p, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn quadratic_near_machine_precision() {
        let mut rng = Rng::from_seed(5);
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[4]);
        let sq = gb.mul(x, x).unwrap();
        let s = gb.sum(sq);
        gb.output("out", s);
        let graph = gb.finish();
        let p = point_of(vec![(
            "x",
            Array::fill_uniform(vec![4], -2.0, 2.0, &mut rng),
        )]);
        let err = finite_diff_check(&graph, &p, 1e-5).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        // Five-class instance: loss = -log softmax(x)[target].
        let mut rng = Rng::from_seed(17);
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[1, 5]);
        let p = gb.softmax(x);
        let picked = gb.gather(p, vec![2]).unwrap();
        let lp = gb.log(picked);
        let neg = gb.scale(lp, -1.0);
        let s = gb.sum(neg);
        gb.output("out", s);
        let graph = gb.finish();

        let pt = point_of(vec![(
            "x",
            Array::fill_uniform(vec![1, 5], -2.0, 2.0, &mut rng),
        )]);
        let err = finite_diff_check(&graph, &pt, 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    /// Forward of a 2-layer MLP through the graph must agree with an
    /// independent straight-line loop over the same weights.
    #[test]
    fn two_layer_mlp_matches_straight_line_oracle() {
        let mut rng = Rng::from_seed(99);
        let (n, d, h, o) = (3, 4, 5, 2);
        let xv = Array::fill_uniform(vec![n, d], -1.0, 1.0, &mut rng);
        let w1 = Array::fill_uniform(vec![d, h], -1.0, 1.0, &mut rng);
        let b1 = Array::fill_uniform(vec![h], -1.0, 1.0, &mut rng);
        let w2 = Array::fill_uniform(vec![h, o], -1.0, 1.0, &mut rng);
        let b2 = Array::fill_uniform(vec![o], -1.0, 1.0, &mut rng);

        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[n, d]);
        let w1n = gb.constant(w1.clone());
        let b1n = gb.constant(b1.clone());
        let w2n = gb.constant(w2.clone());
        let b2n = gb.constant(b2.clone());
        let h1 = gb.matmul(x, w1n).unwrap();
        let h1 = gb.add_row(h1, b1n).unwrap();
        let h1 = gb.relu(h1);
        let h2 = gb.matmul(h1, w2n).unwrap();
        let h2 = gb.add_row(h2, b2n).unwrap();
        gb.output("y", h2);
        let graph = gb.finish();

        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = graph.forward(&b).unwrap();
        let got = eval.output("y").unwrap();

        // Oracle: plain nested loops, no shared code with the graph path.
        for i in 0..n {
            let mut hidden = vec![0.0; h];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let mut acc = b1.data()[j];
                for k in 0..d {
                    acc += xv.at(i, k) * w1.at(k, j);
                }
                *hv = acc.max(0.0);
            }
            for j in 0..o {
                let mut acc = b2.data()[j];
                for (k, hv) in hidden.iter().enumerate() {
                    acc += hv * w2.at(k, j);
                }
                assert!(
                    (got.at(i, j) - acc).abs() < 1e-12,
                    "row {i} col {j}: {} vs {acc}",
                    got.at(i, j)
                );
            }
        }
    }

    /// Every primitive's analytic gradient matches central finite
    /// differences within 1e-6 relative error on random inputs in [-2, 2],
    /// 100 seeded trials per primitive.
    #[test]
    fn every_primitive_against_finite_differences() {
        type Build = fn(&mut GraphBuilder, NodeId, NodeId) -> NodeId;
        // (name, builder, needs_positive_a, avoid_kink)
        let cases: Vec<(&str, Build, bool, bool)> = vec![
            ("add", |gb, a, b| gb.add(a, b).unwrap(), false, false),
            ("sub", |gb, a, b| gb.sub(a, b).unwrap(), false, false),
            ("mul", |gb, a, b| gb.mul(a, b).unwrap(), false, false),
            ("div", |gb, a, b| gb.div(a, b).unwrap(), false, false),
            ("matmul", |gb, a, b| gb.matmul(a, b).unwrap(), false, false),
            (
                "transpose",
                |gb, a, _| gb.transpose(a),
                false,
                false,
            ),
            ("scale", |gb, a, _| gb.scale(a, -1.7), false, false),
            ("add_scalar", |gb, a, _| gb.add_scalar(a, 0.3), false, false),
            ("relu", |gb, a, _| gb.relu(a), false, true),
            ("sigmoid", |gb, a, _| gb.sigmoid(a), false, false),
            ("softmax", |gb, a, _| gb.softmax(a), false, false),
            ("layer_norm", |gb, a, _| gb.layer_norm(a), false, false),
            ("log", |gb, a, _| gb.log(a), true, false),
            ("abs", |gb, a, _| gb.abs(a), false, true),
            (
                "gather",
                |gb, a, _| gb.gather(a, vec![2, 0, 3]).unwrap(),
                false,
                false,
            ),
            (
                "select_rows",
                |gb, a, _| gb.select_rows(a, vec![1, 1, 0]).unwrap(),
                false,
                false,
            ),
            (
                "slice_cols",
                |gb, a, _| gb.slice_cols(a, 1, 2).unwrap(),
                false,
                false,
            ),
            (
                "concat_rows",
                |gb, a, b| gb.concat_rows(vec![a, b]).unwrap(),
                false,
                false,
            ),
            (
                "concat_cols",
                |gb, a, b| gb.concat_cols(vec![a, b]).unwrap(),
                false,
                false,
            ),
            ("add_row_mul_row", |gb, a, b| {
                // exercised together through a [1 x 4] second operand
                let v = gb.slice_cols(b, 0, 4).unwrap();
                let v = gb.select_rows(v, vec![0]).unwrap();
                let t = gb.add_row(a, v).unwrap();
                gb.mul_row(t, v).unwrap()
            }, false, false),
        ];

        for (name, build, positive, avoid_kink) in cases {
            let mut worst: f64 = 0.0;
            for trial in 0..100u64 {
                let mut rng = Rng::from_seed(1000 + trial);
                let sample = |rng: &mut Rng, n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| {
                            let mut v = rng.uniform_in(-2.0, 2.0);
                            if positive {
                                v = v.abs().max(0.1);
                            }
                            // derivative undefined at the kink; keep clear
                            if avoid_kink && v.abs() < 0.2 {
                                v = if v >= 0.0 { v + 0.3 } else { v - 0.3 };
                            }
                            v
                        })
                        .collect()
                };
                let av = Array::matrix(3, 4, sample(&mut rng, 12));
                let bv = if name == "matmul" {
                    Array::matrix(4, 3, sample(&mut rng, 12))
                } else {
                    Array::matrix(3, 4, sample(&mut rng, 12))
                };

                let mut gb = GraphBuilder::new();
                let a = gb.input("a", av.shape());
                let b = gb.input("b", bv.shape());
                let y = build(&mut gb, a, b);
                // reduce through a nonlinearity so every output element has
                // a distinct nonzero pull on the gradient
                let sig = gb.sigmoid(y);
                let s = gb.sum(sig);
                gb.output("out", s);
                let graph = gb.finish();

                let p = point_of(vec![("a", av), ("b", bv)]);
                let err = finite_diff_check(&graph, &p, 1e-5).unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-6, "{name}: worst relative error {worst}");
        }
    }
}
