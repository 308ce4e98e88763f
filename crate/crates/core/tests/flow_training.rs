use lung_anomaly::flow::{nf_fit, FlowConfig};
use lung_anomaly::gmm::{gmm_fit, EmConfig};
use lung_anomaly::rng::seeded;
use lung_anomaly::{Error, GenerativeModel};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn small(epochs: usize, standardize: bool) -> FlowConfig {
    FlowConfig {
        n_blocks: 4,
        hidden: 32,
        batch_size: 100,
        epochs,
        standardize,
        seed: 3,
        ..FlowConfig::default()
    }
}

fn mean_nll(model: &GenerativeModel<f64>, rows: &[Vec<f64>]) -> f64 {
    use lung_anomaly::DensityModel;
    rows.iter().map(|z| -model.log_density(z).unwrap()).sum::<f64>() / rows.len() as f64
}

#[test]
fn learns_the_gaussian_entropy() {
    let mut rng = seeded(1);
    let sigma = [0.5, 2.0, 1.0, 3.0];
    let rows: Vec<Vec<f64>> = (0..2000)
        .map(|_| {
            (0..4)
                .map(|a| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    5.0 + sigma[a] * e
                })
                .collect()
        })
        .collect();
    let entropy =
        2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + sigma.iter().map(|s| s.ln()).sum::<f64>();
    let fit = nf_fit(&rows, &small(30, true)).unwrap();
    let nll = mean_nll(&GenerativeModel::Flow(fit.model), &rows);
    assert!((nll - entropy).abs() < 0.1, "{nll} vs {entropy}");
}

#[test]
fn training_lowers_the_loss_without_standardization() {
    let mut rng = seeded(2);
    let rows: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let e: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            vec![1.0 + 0.5 * e[0], -2.0 + 0.3 * e[1]]
        })
        .collect();
    let fit = nf_fit(&rows, &small(20, false)).unwrap();
    let first = fit.loss_trace[0];
    let last = *fit.loss_trace.last().unwrap();
    assert!(last < first - 1.0, "{first} -> {last}");
}

/// A banana-shaped density no single Gaussian captures.
#[test]
fn beats_a_single_gaussian_on_curved_data() {
    let mut rng = seeded(3);
    fn sample(rng: &mut impl Rng) -> Vec<f64> {
        let x: f64 = StandardNormal.sample(rng);
        let e: f64 = StandardNormal.sample(rng);
        vec![x, x * x + 0.2 * e]
    }
    let train: Vec<Vec<f64>> = (0..3000).map(|_| sample(&mut rng)).collect();
    let test: Vec<Vec<f64>> = (0..3000).map(|_| sample(&mut rng)).collect();
    let flow = nf_fit(&train, &small(40, true)).unwrap();
    let gauss = gmm_fit(&train, 1, &EmConfig::default()).unwrap();
    let nf = mean_nll(&GenerativeModel::Flow(flow.model), &test);
    let g = mean_nll(&GenerativeModel::Gmm(gauss.model), &test);
    assert!(nf < g - 0.3, "flow {nf} vs gaussian {g}");
}

#[test]
fn huge_learning_rate_reports_divergence_with_state() {
    let mut rng = seeded(4);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0) * 1e3).collect())
        .collect();
    let cfg = FlowConfig {
        learning_rate: 1e12,
        ..small(50, false)
    };
    match nf_fit(&rows, &cfg) {
        Err(Error::Diverged { last_state, .. }) => assert_eq!(last_state.dim(), 2),
        // a finite run is acceptable, but its loss must be finite throughout
        Ok(fit) => assert!(fit.loss_trace.iter().all(|l| l.is_finite())),
        Err(e) => panic!("unexpected error {e}"),
    }
}
