use hyperlat::autodiff::Tape;
use hyperlat::losses::{beta_at_epoch, total_loss, LossBreakdown, LossSpec};
use hyperlat::matrix::DenseMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| DenseMatrix::from_fn(rows, cols, |i, j| v[i * cols + j]))
}

fn evaluate(x: &DenseMatrix, x_hat: &DenseMatrix, mu: &DenseMatrix, sigma: &DenseMatrix, spec: &LossSpec, epoch: usize) -> LossBreakdown {
    let mut tape = Tape::new();
    let vars = [x, x_hat, mu, sigma].map(|m| tape.leaf(m.clone()));
    total_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], spec, epoch).unwrap().1
}

fn specs(n: usize) -> [LossSpec; 4] {
    [
        LossSpec::compressed(n),
        LossSpec::vmf(n),
        LossSpec::uncompressed(n),
        LossSpec::plain(n),
    ]
}

proptest! {
    #[test]
    fn total_is_mse_plus_weighted_kld(
        x in matrix(6, 5, 0.0, 1.0),
        x_hat in matrix(6, 5, 0.0, 1.0),
        mu in matrix(6, 4, -2.0, 2.0),
        sigma in matrix(6, 4, 0.05, 2.0),
        epoch in 0usize..150,
    ) {
        let mse = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 30.0;
        for spec in specs(4) {
            let b = evaluate(&x, &x_hat, &mu, &sigma, &spec, epoch);
            prop_assert!((b.mse - mse).abs() < 1e-12);
            prop_assert_eq!(b.beta, beta_at_epoch(&spec, epoch));
            let kld = b.angle.total + b.radial.total + b.cartesian_kld;
            prop_assert!(kld >= 0.0);
            prop_assert!((b.total - (mse + b.beta * kld)).abs() <= 1e-10 * (1.0 + b.total.abs()));
            if epoch == 0 {
                prop_assert_eq!(b.total, b.mse);
            }
        }
    }

    #[test]
    fn kld_ignores_batch_order(
        mu in matrix(8, 5, -2.0, 2.0),
        sigma in matrix(8, 5, 0.05, 2.0),
        rot in 1usize..8,
    ) {
        let order: Vec<usize> = (0..8).map(|i| (i + rot) % 8).collect();
        let x = DenseMatrix::zeros(8, 3);
        for spec in specs(5) {
            let a = evaluate(&x, &x, &mu, &sigma, &spec, 50);
            let b = evaluate(&x, &x, &mu.select_rows(&order), &sigma.select_rows(&order), &spec, 50);
            prop_assert!((a.total - b.total).abs() <= 1e-10 * (1.0 + a.total.abs()));
        }
    }
}

#[test]
fn beta_ramps_then_holds() {
    let spec = LossSpec::compressed(4);
    let e = spec.anneal_epochs;
    assert_eq!(beta_at_epoch(&spec, 0), 0.0);
    assert_eq!(beta_at_epoch(&spec, e / 4), spec.beta_max * 0.5);
    assert_eq!(beta_at_epoch(&spec, e), spec.beta_max);
    assert_eq!(beta_at_epoch(&spec, 10 * e), spec.beta_max);
}
