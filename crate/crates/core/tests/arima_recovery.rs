use rand::Rng;
use rand_distr::StandardNormal;
use reachcast::arima::{fit, select_order, select_order_in, ArimaOrder};
use reachcast::forecast::{forecast, ArimaForecaster, ForecastRequest, TargetCount};
use reachcast::ingest::select_context;
use reachcast::rng::substream;
use reachcast::synth::{gen_cohort, ProtocolMix};
use reachcast::types::{DirectionCode, Protocol, TRACE_LEN};

fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, &[1]);
    let mut x = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n + 100 {
        x = phi * x + rng.sample::<f64, _>(StandardNormal);
        if i >= 100 {
            out.push(x);
        }
    }
    out
}

fn random_walk(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, &[2]);
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            x += rng.sample::<f64, _>(StandardNormal);
            x
        })
        .collect()
}

#[test]
fn ar1_coefficient_recovered() {
    let hits = (0..12)
        .filter(|&s| {
            let m = fit(&ar1(0.7, 512, s), ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
            (0.6..=0.8).contains(&m.ar[0])
        })
        .count();
    assert!(hits >= 11, "{hits}/12");
}

#[test]
fn random_walk_selects_first_difference() {
    let hits = (0..8)
        .filter(|&s| select_order(&random_walk(512, s)).unwrap().order.d == 1)
        .count();
    assert!(hits >= 7, "{hits}/8");
}

#[test]
fn restricted_grid_is_respected() {
    let grid = [
        ArimaOrder::new(0, 0, 0).unwrap(),
        ArimaOrder::new(1, 0, 0).unwrap(),
    ];
    let sel = select_order_in(&ar1(0.7, 256, 3), &grid).unwrap();
    assert_eq!(sel.order, grid[1]);
    assert_eq!(sel.candidates.len(), 2);
}

#[test]
fn arima_forecaster_returns_count_times_m_per_direction() {
    let cohort = gen_cohort(1, 0, &ProtocolMix::Single(Protocol::P1), 17).unwrap();
    let s = &cohort.subjects()[0];
    let split = select_context(s, 8).unwrap();
    let targets = vec![
        TargetCount {
            direction: DirectionCode::new(0).unwrap(),
            count: 2,
        },
        TargetCount {
            direction: DirectionCode::new(3).unwrap(),
            count: 1,
        },
    ];
    let req = ForecastRequest::new(s.subject_id(), &split.context, targets, 5, 99).unwrap();
    let fc = ArimaForecaster::default();
    let pool = forecast(&fc, &req).unwrap();
    assert_eq!(pool.get(DirectionCode::new(0).unwrap()).len(), 10);
    assert_eq!(pool.get(DirectionCode::new(3).unwrap()).len(), 5);
    for t in pool.get(DirectionCode::new(0).unwrap()) {
        assert_eq!(t.samples().len(), TRACE_LEN);
        assert!(t.samples().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    let again = forecast(&fc, &req).unwrap();
    assert_eq!(pool, again);
}
