//! Trade-order generation.
//!
//! Normal mode spreads the per-tick total evenly; hard mode modulates it by
//! the product of two sinusoids with configurable periods (defaults 112 and
//! 28 ticks). Each ordered pair draws its share from a clipped Gaussian.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::sim::topology::{OrderMode, OrderModel};
use crate::sim::PortId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Order {
    pub src: PortId,
    pub dst: PortId,
    pub quantity: i64,
}

/// Per-tick order total before the pair split.
pub fn total_at(tick: u64, model: &OrderModel, mode: OrderMode) -> f64 {
    match mode {
        OrderMode::Normal => model.total_base,
        OrderMode::Hard => {
            let t = tick as f64;
            let [p1, p2] = model.trend_periods;
            let [a1, a2] = model.trend_amplitudes;
            let f1 = 1.0 + a1 * (2.0 * std::f64::consts::PI * t / p1 as f64).sin();
            let f2 = 1.0 + a2 * (2.0 * std::f64::consts::PI * t / p2 as f64).sin();
            (model.total_base * f1 * f2).max(0.0)
        }
    }
}

/// Draws this tick's orders. Pairs are visited in their configured order and
/// each consumes exactly one Gaussian draw (none when its sigma is zero), so
/// the RNG stream is reproducible.
pub fn generate_orders(
    tick: u64,
    model: &OrderModel,
    mode: OrderMode,
    rng: &mut ChaCha8Rng,
) -> Vec<Order> {
    let total = total_at(tick, model, mode);
    let mut orders = Vec::with_capacity(model.pair_params.len());
    for pair in &model.pair_params {
        let share = if pair.sigma > 0.0 {
            let normal = Normal::new(pair.mu, pair.sigma).expect("validated sigma");
            normal.sample(rng).clamp(0.0, 1.0)
        } else {
            pair.mu.clamp(0.0, 1.0)
        };
        let quantity = (share * total).round() as i64;
        if quantity > 0 {
            orders.push(Order {
                src: pair.src,
                dst: pair.dst,
                quantity,
            });
        }
    }
    orders
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::topology::{bundled, PairParam};
    use rand::{Rng, SeedableRng};

    fn zero_sigma_model() -> OrderModel {
        let mut model = bundled().order_model;
        for p in &mut model.pair_params {
            p.sigma = 0.0;
        }
        model
    }

    #[test]
    fn normal_mode_zero_sigma_is_constant() {
        let model = zero_sigma_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = generate_orders(3, &model, OrderMode::Normal, &mut rng);
        let b = generate_orders(77, &model, OrderMode::Normal, &mut rng);
        assert_eq!(a, b);
        for (order, pair) in a.iter().zip(
            model
                .pair_params
                .iter()
                .filter(|p| (p.mu * model.total_base).round() > 0.0),
        ) {
            assert_eq!(order.quantity, (pair.mu * model.total_base).round() as i64);
        }
    }

    #[test]
    fn hard_mode_total_is_base_where_both_sines_vanish() {
        let model = zero_sigma_model();
        // t = 56 k: sin(2πt/112) = sin(kπ) = 0 and 14 | 56 ⇒ sin(2πt/28) = 0
        for t in [0u64, 56, 112, 168, 224] {
            let total = total_at(t, &model, OrderMode::Hard);
            assert!(
                (total - model.total_base).abs() < 1e-9,
                "t={t}: {total} vs {}",
                model.total_base
            );
        }
    }

    #[test]
    fn hard_mode_total_never_negative() {
        let mut model = zero_sigma_model();
        model.trend_amplitudes = [1.5, 0.9];
        for t in 0..448 {
            assert!(total_at(t, &model, OrderMode::Hard) >= 0.0);
        }
    }

    #[test]
    fn degenerate_sigma_consumes_no_rng() {
        let model = zero_sigma_model();
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        generate_orders(1, &model, OrderMode::Normal, &mut rng1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(rng1.gen::<u64>(), rng2.gen::<u64>());
    }

    #[test]
    fn shares_are_clipped_to_unit_interval() {
        let model = OrderModel {
            pair_params: vec![PairParam {
                src: PortId(0),
                dst: PortId(1),
                mu: 0.9,
                sigma: 5.0,
            }],
            ..zero_sigma_model()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for tick in 0..200 {
            for order in generate_orders(tick, &model, OrderMode::Normal, &mut rng) {
                assert!(order.quantity as f64 <= model.total_base + 0.5);
                assert!(order.quantity >= 0);
            }
        }
    }

    /// Autocorrelation of the noise-free hard-mode series over 448 ticks
    /// peaks at the two configured periods: the long period is the dominant
    /// raw-autocorrelation peak; deflating the fitted long-period sinusoid
    /// exposes the short period as the dominant residual peak.
    #[test]
    fn hard_mode_autocorrelation_peaks_at_trend_periods() {
        let model = zero_sigma_model();
        let series: Vec<f64> = (0..448)
            .map(|t| total_at(t, &model, OrderMode::Hard))
            .collect();
        let long = dominant_autocorrelation_peak(&series, 130).expect("long-period peak");
        assert_eq!(long, 112, "dominant autocorrelation lag");
        let residual = deflate_period(&series, long as f64);
        let short = dominant_autocorrelation_peak(&residual, 60).expect("short-period peak");
        assert_eq!(short, 28, "residual autocorrelation lag");
    }

    fn autocorrelation(series: &[f64], max_lag: usize) -> Vec<f64> {
        let n = series.len();
        let mean = series.iter().sum::<f64>() / n as f64;
        let var: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
        (0..=max_lag + 1)
            .map(|lag| {
                let mut acc = 0.0;
                for i in 0..n - lag {
                    acc += (series[i] - mean) * (series[i + lag] - mean);
                }
                acc / var
            })
            .collect()
    }

    /// Strongest local maximum of the autocorrelation over lags 2..=max_lag.
    pub(crate) fn dominant_autocorrelation_peak(series: &[f64], max_lag: usize) -> Option<usize> {
        let rs = autocorrelation(series, max_lag);
        (2..=max_lag)
            .filter(|&l| rs[l] > rs[l - 1] && rs[l] >= rs[l + 1] && rs[l] > 0.05)
            .max_by(|&a, &b| rs[a].total_cmp(&rs[b]))
    }

    /// Subtracts the least-squares sinusoid at `period` from the series.
    pub(crate) fn deflate_period(series: &[f64], period: f64) -> Vec<f64> {
        let m = series.len() as f64;
        let w = 2.0 * std::f64::consts::PI / period;
        let mut sin_coef = 0.0;
        let mut cos_coef = 0.0;
        for (t, v) in series.iter().enumerate() {
            sin_coef += v * (w * t as f64).sin();
            cos_coef += v * (w * t as f64).cos();
        }
        sin_coef *= 2.0 / m;
        cos_coef *= 2.0 / m;
        series
            .iter()
            .enumerate()
            .map(|(t, v)| v - sin_coef * (w * t as f64).sin() - cos_coef * (w * t as f64).cos())
            .collect()
    }
}
