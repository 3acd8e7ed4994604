//! Closed-form attack-cost calculators in exact rational arithmetic.
//!
//! Values stay exact until they are shown; display rounds half-up to two
//! decimals. Where a published derivation carries a rounded figure into the
//! next step, the chain builders do the same so the printed numbers agree.

use serde::Serialize;
use thiserror::Error;

use crate::ble::{effective_adverts_per_second, AirtimeModel, LinkBudget};
use crate::rational::{ceil_int, fixed, floor_int, grouped, int, round_half_up, Q};
use num_traits::{One, Zero};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeasibilityError {
    #[error("invalid input: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, FeasibilityError> {
    Err(FeasibilityError::Invalid(msg.into()))
}

fn fraction(name: &str, q: &Q) -> Result<(), FeasibilityError> {
    if *q < Q::zero() || *q > Q::one() {
        return invalid(format!("{name} must be within [0, 1], got {}", fixed(q, 4)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpidemicParams {
    pub incidence_per_100k_week: Q,
    pub positive_test_rate: Q,
    pub upload_share: Q,
}

impl EpidemicParams {
    /// Germany, summer 2020: 5.1 weekly cases per 100k, 3.62 % of tests
    /// positive, 9.84 % of positives uploading.
    pub fn germany_2020() -> Self {
        Self {
            incidence_per_100k_week: Q::new(51, 10),
            positive_test_rate: Q::new(362, 10_000),
            upload_share: Q::new(984, 10_000),
        }
    }

    pub fn validate(&self) -> Result<(), FeasibilityError> {
        if self.incidence_per_100k_week < Q::zero() {
            return invalid("incidence must be non-negative");
        }
        fraction("positive_test_rate", &self.positive_test_rate)?;
        fraction("upload_share", &self.upload_share)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectionParams {
    pub unique_rpis_per_min: Q,
    pub avg_rpi_validity_min: Q,
    pub replay_window_min: Q,
}

impl CollectionParams {
    pub fn new(unique_rpis_per_min: Q) -> Self {
        Self {
            unique_rpis_per_min,
            avg_rpi_validity_min: int(5),
            replay_window_min: int(120),
        }
    }

    pub fn validate(&self) -> Result<(), FeasibilityError> {
        if self.unique_rpis_per_min <= Q::zero()
            || self.avg_rpi_validity_min <= Q::zero()
            || self.replay_window_min <= Q::zero()
        {
            return invalid("collection rates must be positive");
        }
        Ok(())
    }
}

/// Parses `mm:ss`, `hh:mm:ss` or plain seconds.
pub fn parse_duration(s: &str) -> Result<u64, FeasibilityError> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let nums: Option<Vec<u64>> = parts.iter().map(|p| p.parse().ok()).collect();
    match nums.as_deref() {
        Some([s]) => Ok(*s),
        Some([m, s]) if *s < 60 => Ok(m * 60 + s),
        Some([h, m, s]) if *m < 60 && *s < 60 => Ok(h * 3600 + m * 60 + s),
        _ => invalid(format!("bad duration {s:?} (expected mm:ss, hh:mm:ss or seconds)")),
    }
}

/// Unique RPIs per minute.
pub fn collection_rate(unique_rpis: u64, duration_s: u64) -> Result<Q, FeasibilityError> {
    if duration_s == 0 {
        return invalid("duration must be positive");
    }
    Ok(int(i128::from(unique_rpis)) * int(60) / int(i128::from(duration_s)))
}

/// How many distinct RPIs one must receive, on average, to meet one that
/// belongs to a key that will be published: keys cover 14 days and the
/// incidence is weekly, so `1 / (incidence / 100000 / 7 * 14)`.
pub fn rpis_per_positive(p: &EpidemicParams) -> Result<Q, FeasibilityError> {
    if p.incidence_per_100k_week <= Q::zero() {
        return invalid("incidence must be positive");
    }
    Ok(Q::one() / (p.incidence_per_100k_week / int(100_000) / int(7) * int(14)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DevicesNeeded {
    pub raw: Q,
    pub rounded: i128,
}

/// Devices needed so that, at any moment, at least one relays a positive RPI.
pub fn wormhole_devices_needed(
    p: &EpidemicParams,
    c: &CollectionParams,
) -> Result<DevicesNeeded, FeasibilityError> {
    c.validate()?;
    let raw = rpis_per_positive(p)? / (c.unique_rpis_per_min * c.avg_rpi_validity_min);
    Ok(DevicesNeeded {
        raw,
        rounded: ceil_int(&raw),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestCenter {
    pub infected_per_hour: Q,
    pub uploads_per_hour: Q,
}

pub fn test_center(p: &EpidemicParams, tests_per_hour: Q) -> Result<TestCenter, FeasibilityError> {
    p.validate()?;
    if tests_per_hour < Q::zero() {
        return invalid("tests per hour must be non-negative");
    }
    let infected = tests_per_hour * p.positive_test_rate;
    Ok(TestCenter {
        infected_per_hour: infected,
        uploads_per_hour: infected * p.upload_share,
    })
}

/// Positive identities available for replay at once with a window of
/// `replay_window_min` minutes.
pub fn replay_exposures(uploads_per_hour: Q, replay_window_min: Q) -> Result<Q, FeasibilityError> {
    if uploads_per_hour < Q::zero() || replay_window_min < Q::zero() {
        return invalid("inputs must be non-negative");
    }
    Ok(uploads_per_hour / int(60) * replay_window_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetedReach {
    pub per_hour: Q,
    pub per_hour_whole: i128,
    pub total: i128,
}

/// Devices a single sniffer meets while collecting `hours_per_day` for `days`.
pub fn targeted_reach(rate_per_min: Q, hours_per_day: u32, days: u32) -> Result<TargetedReach, FeasibilityError> {
    if rate_per_min <= Q::zero() || hours_per_day == 0 || days == 0 {
        return invalid("inputs must be positive");
    }
    let per_hour = rate_per_min * int(60);
    let whole = floor_int(&per_hour);
    Ok(TargetedReach {
        per_hour,
        per_hour_whole: whole,
        total: whole * i128::from(days) * i128::from(hours_per_day),
    })
}

/// Sensing stations per transport category as a `(low, high)` estimate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoveragePlan {
    pub categories: Vec<(String, u32, u32)>,
}

impl CoveragePlan {
    /// Estimate for a mid-sized city.
    pub fn city_estimate() -> Self {
        Self {
            categories: vec![
                ("Trams".into(), 25, 25),
                ("Buses".into(), 60, 80),
                ("Railways".into(), 60, 60),
                ("Cars".into(), 200, 250),
                ("Pedestrians".into(), 50, 50),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), FeasibilityError> {
        for (name, lo, hi) in &self.categories {
            if lo > hi {
                return invalid(format!("{name}: low {lo} exceeds high {hi}"));
            }
        }
        Ok(())
    }
}

pub fn coverage_total(plan: &CoveragePlan) -> Result<(u64, u64), FeasibilityError> {
    plan.validate()?;
    Ok(plan
        .categories
        .iter()
        .fold((0, 0), |(lo, hi), (_, l, h)| (lo + u64::from(*l), hi + u64::from(*h))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AirtimeReport {
    pub payload_bytes: u32,
    pub advertisement_bytes: u32,
    pub pdu_bytes: u32,
    pub on_air_us: Q,
    pub inter_frame_space_us: u32,
    pub max_per_second: Q,
    pub rx_fraction: Q,
    pub effective_per_second: Q,
}

impl AirtimeReport {
    pub fn effective_rounded(&self) -> i128 {
        floor_int(&round_half_up(&self.effective_per_second, 0))
    }
}

pub fn theoretical_vs_effective(
    model: &AirtimeModel,
    budget: &LinkBudget,
) -> Result<AirtimeReport, FeasibilityError> {
    if !model.is_valid() {
        return invalid("airtime model needs positive sizes and PHY rate");
    }
    let effective = effective_adverts_per_second(model, budget).map_err(FeasibilityError::Invalid)?;
    Ok(AirtimeReport {
        payload_bytes: model.payload_bytes,
        advertisement_bytes: model.advertisement_bytes,
        pdu_bytes: model.pdu_bytes,
        on_air_us: model.on_air_us(),
        inter_frame_space_us: model.inter_frame_space_us,
        max_per_second: model.max_adverts_per_second(),
        rx_fraction: budget.rx_fraction,
        effective_per_second: effective,
    })
}

/// One line of a derivation: a label, the arithmetic, and the shown result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Step {
    pub label: String,
    pub expression: String,
    pub value: String,
    /// Exact value as a reduced fraction.
    pub exact: String,
}

impl Step {
    fn new(label: &str, expression: impl Into<String>, value: impl Into<String>, exact: &Q) -> Self {
        Self {
            label: label.into(),
            expression: expression.into(),
            value: value.into(),
            exact: exact.to_string(),
        }
    }
}

/// A labelled derivation chain, printable as text or JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Calculation {
    pub calc: String,
    pub steps: Vec<Step>,
}

impl Calculation {
    fn new(calc: &str) -> Self {
        Self {
            calc: calc.into(),
            steps: Vec::new(),
        }
    }

    fn step(mut self, label: &str, expression: impl Into<String>, value: impl Into<String>, exact: &Q) -> Self {
        self.steps.push(Step::new(label, expression, value, exact));
        self
    }

    /// Shown value of the step labelled `label`.
    pub fn value(&self, label: &str) -> Option<&str> {
        self.steps.iter().find(|s| s.label == label).map(|s| s.value.as_str())
    }

    pub fn to_text(&self) -> String {
        let width = self.steps.iter().map(|s| s.label.len()).max().unwrap_or(0);
        let mut out = format!("[{}]\n", self.calc);
        for s in &self.steps {
            out.push_str(&format!("  {:<width$}  {} = {}\n", s.label, s.expression, s.value));
        }
        out
    }
}

fn d2(q: &Q) -> String {
    fixed(q, 2)
}

pub fn collection_chain(unique_rpis: u64, duration_s: u64) -> Result<Calculation, FeasibilityError> {
    let rate = collection_rate(unique_rpis, duration_s)?;
    Ok(Calculation::new("collection-rate").step(
        "rpis_per_min",
        format!("{unique_rpis} / ({duration_s} s / 60)"),
        d2(&rate),
        &rate,
    ))
}

pub fn devices_chain(p: &EpidemicParams, c: &CollectionParams) -> Result<Calculation, FeasibilityError> {
    let per_pos = rpis_per_positive(p)?;
    let dev = wormhole_devices_needed(p, c)?;
    let inc = d2(&p.incidence_per_100k_week);
    Ok(Calculation::new("devices")
        .step(
            "rpis_per_positive",
            format!("1 / ({inc} / 100000 / 7 * 14)"),
            d2(&per_pos),
            &per_pos,
        )
        .step(
            "devices_raw",
            format!(
                "{} / {} / {}",
                d2(&per_pos),
                d2(&c.unique_rpis_per_min),
                d2(&c.avg_rpi_validity_min)
            ),
            d2(&dev.raw),
            &dev.raw,
        )
        .step(
            "devices",
            format!("ceil({})", d2(&dev.raw)),
            dev.rounded.to_string(),
            &int(dev.rounded),
        ))
}

/// Test-centre chain. The two-decimal upload figure is what feeds the replay
/// step, as in the published derivation.
pub fn test_center_chain(
    p: &EpidemicParams,
    tests_per_hour: Q,
    replay_window_min: Q,
) -> Result<Calculation, FeasibilityError> {
    let tc = test_center(p, tests_per_hour)?;
    let uploads_shown = round_half_up(&tc.uploads_per_hour, 2);
    let replay = replay_exposures(uploads_shown, replay_window_min)?;
    Ok(Calculation::new("test-center")
        .step(
            "infected_per_hour",
            format!("{} * {}%", d2(&tests_per_hour), d2(&(p.positive_test_rate * int(100)))),
            d2(&tc.infected_per_hour),
            &tc.infected_per_hour,
        )
        .step(
            "uploads_per_hour",
            format!("{} * {}%", d2(&tc.infected_per_hour), d2(&(p.upload_share * int(100)))),
            d2(&tc.uploads_per_hour),
            &tc.uploads_per_hour,
        )
        .step(
            "replayable_positives",
            format!("{} / 60 * {}", d2(&uploads_shown), d2(&replay_window_min)),
            d2(&replay),
            &replay,
        ))
}

pub fn targeted_chain(rate_per_min: Q, hours_per_day: u32, days: u32) -> Result<Calculation, FeasibilityError> {
    let r = targeted_reach(rate_per_min, hours_per_day, days)?;
    Ok(Calculation::new("targeted")
        .step(
            "per_hour",
            format!("{} * 60", d2(&rate_per_min)),
            d2(&r.per_hour),
            &r.per_hour,
        )
        .step(
            "total",
            format!("{} * {days} * {hours_per_day}", r.per_hour_whole),
            grouped(r.total),
            &int(r.total),
        ))
}

pub fn coverage_chain(plan: &CoveragePlan) -> Result<Calculation, FeasibilityError> {
    let (lo, hi) = coverage_total(plan)?;
    let mut calc = Calculation::new("coverage");
    for (name, l, h) in &plan.categories {
        let shown = if l == h { l.to_string() } else { format!("{l} - {h}") };
        calc = calc.step(name, "estimate", shown, &int(i128::from(*l)));
    }
    let los: Vec<String> = plan.categories.iter().map(|c| c.1.to_string()).collect();
    let his: Vec<String> = plan.categories.iter().map(|c| c.2.to_string()).collect();
    Ok(calc.step(
        "total",
        format!("({}) - ({})", los.join(" + "), his.join(" + ")),
        format!("{lo} - {hi}"),
        &int(i128::from(lo)),
    ))
}

pub fn airtime_chain(model: &AirtimeModel, budget: &LinkBudget) -> Result<Calculation, FeasibilityError> {
    let r = theoretical_vs_effective(model, budget)?;
    let pct = r.rx_fraction * int(100);
    Ok(Calculation::new("airtime")
        .step(
            "payload_bytes",
            "rpi + aem + service header",
            r.payload_bytes.to_string(),
            &int(r.payload_bytes.into()),
        )
        .step(
            "advertisement_bytes",
            format!("{} + header and address", r.payload_bytes),
            r.advertisement_bytes.to_string(),
            &int(r.advertisement_bytes.into()),
        )
        .step(
            "pdu_bytes",
            format!("{} + preamble, access address, crc", r.advertisement_bytes),
            r.pdu_bytes.to_string(),
            &int(r.pdu_bytes.into()),
        )
        .step(
            "on_air_us",
            format!("{} * 8 bits / {} bps", r.pdu_bytes, model.phy_rate_bps),
            d2(&r.on_air_us),
            &r.on_air_us,
        )
        .step(
            "max_per_second",
            format!("1e6 / ({} + {})", d2(&r.on_air_us), r.inter_frame_space_us),
            d2(&r.max_per_second),
            &r.max_per_second,
        )
        .step(
            "effective_per_second",
            format!("{} * {}%", d2(&r.max_per_second), fixed(&pct, 1)),
            r.effective_rounded().to_string(),
            &r.effective_per_second,
        ))
}

/// Every published figure, in order.
pub fn all_chains() -> Vec<Calculation> {
    let germany = EpidemicParams::germany_2020();
    let mexico = EpidemicParams {
        positive_test_rate: Q::new(41, 100),
        ..germany
    };
    let rate = Q::new(3043, 100);
    let high = EpidemicParams {
        incidence_per_100k_week: Q::new(454, 10),
        ..germany
    };
    vec![
        collection_chain(549, 25 * 60 + 49).expect("valid"),
        collection_chain(142, 4 * 60 + 40).expect("valid"),
        devices_chain(&germany, &CollectionParams::new(rate)).expect("valid"),
        devices_chain(&high, &CollectionParams::new(rate)).expect("valid"),
        test_center_chain(&germany, int(300), int(120)).expect("valid"),
        test_center_chain(&mexico, int(300), int(120)).expect("valid"),
        targeted_chain(rate, 12, 14).expect("valid"),
        coverage_chain(&CoveragePlan::city_estimate()).expect("valid"),
        airtime_chain(&AirtimeModel::default(), &LinkBudget::default()).expect("valid"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::parse_decimal;

    fn q(s: &str) -> Q {
        parse_decimal(s).unwrap()
    }

    #[test]
    fn collection_rates() {
        assert_eq!(
            d2(&collection_rate(142, parse_duration("4:40").unwrap()).unwrap()),
            "30.43"
        );
        assert_eq!(
            collection_rate(549, parse_duration("25:49").unwrap()).unwrap(),
            Q::new(549 * 60, 1549)
        );
        assert_eq!(collection_rate(0, 17).unwrap(), Q::zero());
        assert!(collection_rate(1, 0).is_err());
        assert_eq!(parse_duration("1:00:05").unwrap(), 3605);
        assert!(parse_duration("1:75").is_err());
    }

    #[test]
    fn devices() {
        let mut p = EpidemicParams::germany_2020();
        assert_eq!(d2(&rpis_per_positive(&p).unwrap()), "9803.92");
        let c = CollectionParams::new(q("30.43"));
        let d = wormhole_devices_needed(&p, &c).unwrap();
        assert_eq!((d2(&d.raw), d.rounded), ("64.44".into(), 65));
        assert_eq!(fixed(&d.raw, 1), "64.4");
        p.incidence_per_100k_week = q("45.4");
        assert_eq!(d2(&rpis_per_positive(&p).unwrap()), "1101.32");
        let d = wormhole_devices_needed(&p, &c).unwrap();
        assert_eq!((d2(&d.raw), d.rounded), ("7.24".into(), 8));
        p.incidence_per_100k_week = int(50);
        assert_eq!(rpis_per_positive(&p).unwrap(), int(1000));
        let faster = wormhole_devices_needed(&p, &CollectionParams::new(int(60))).unwrap();
        assert!(faster.raw < wormhole_devices_needed(&p, &c).unwrap().raw);
    }

    #[test]
    fn test_centres_and_replay() {
        let calc = test_center_chain(&EpidemicParams::germany_2020(), int(300), int(120)).unwrap();
        assert_eq!(calc.value("infected_per_hour"), Some("10.86"));
        assert_eq!(calc.value("uploads_per_hour"), Some("1.07"));
        assert_eq!(calc.value("replayable_positives"), Some("2.14"));
        let mexico = EpidemicParams {
            positive_test_rate: q("41%"),
            ..EpidemicParams::germany_2020()
        };
        let calc = test_center_chain(&mexico, int(300), int(120)).unwrap();
        assert_eq!(calc.value("infected_per_hour"), Some("123.00"));
        assert_eq!(calc.value("uploads_per_hour"), Some("12.10"));
        assert_eq!(calc.value("replayable_positives"), Some("24.20"));
        let zero = test_center(&mexico, Q::zero()).unwrap();
        assert!(zero.infected_per_hour.is_zero() && zero.uploads_per_hour.is_zero());
        assert_eq!(replay_exposures(q("1.07"), Q::zero()).unwrap(), Q::zero());
        assert_eq!(
            replay_exposures(q("1.07"), int(240)).unwrap(),
            replay_exposures(q("1.07"), int(120)).unwrap() * int(2)
        );
    }

    #[test]
    fn reach_and_coverage() {
        let r = targeted_reach(q("30.43"), 12, 14).unwrap();
        assert_eq!(
            (d2(&r.per_hour), r.per_hour_whole, r.total),
            ("1825.80".into(), 1825, 306_600)
        );
        assert_eq!(targeted_reach(q("30.43"), 1, 1).unwrap().total, 1825);
        assert_eq!(coverage_total(&CoveragePlan::city_estimate()).unwrap(), (395, 465));
        assert_eq!(coverage_total(&CoveragePlan::default()).unwrap(), (0, 0));
        let single = CoveragePlan {
            categories: vec![("Trams".into(), 3, 9)],
        };
        assert_eq!(coverage_total(&single).unwrap(), (3, 9));
        let bad = CoveragePlan {
            categories: vec![("Cars".into(), 9, 3)],
        };
        assert!(coverage_total(&bad).is_err());
    }

    #[test]
    fn airtime_chain_values() {
        let calc = airtime_chain(&AirtimeModel::default(), &LinkBudget::default()).unwrap();
        let shown: Vec<&str> = calc.steps.iter().map(|s| s.value.as_str()).collect();
        assert_eq!(shown, ["26", "39", "47", "376.00", "1901.14", "82"]);
        let fast = theoretical_vs_effective(
            &AirtimeModel::default().with_phy_rate(2_000_000),
            &LinkBudget::default(),
        )
        .unwrap();
        assert_eq!(fast.on_air_us, int(188));
        let no_ifs = theoretical_vs_effective(
            &AirtimeModel::default().with_inter_frame_space(0),
            &LinkBudget::default(),
        )
        .unwrap();
        assert_eq!(floor_int(&no_ifs.max_per_second), 2659);
    }

    #[test]
    fn chains_serialize() {
        let all = all_chains();
        assert_eq!(all.len(), 9);
        let json = serde_json::to_value(&all).unwrap();
        assert_eq!(json[6]["steps"][1]["value"], "306,600");
        assert!(all[8].to_text().contains("effective_per_second"));
    }
}
