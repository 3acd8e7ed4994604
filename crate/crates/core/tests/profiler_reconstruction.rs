//! Reconstructed visits against what the simulator says happened.

use gap_lab::profiler::{profile, ProfileConfig, Subject};
use gap_lab::sim::{commuter_scenario, fig5_scenario, run_scenario, Scenario};

/// Checks every diagnosed visit was rebuilt with arrival and departure off
/// by at most one advertising period.
fn check_visits(scenario: &Scenario) {
    let sim = run_scenario(scenario).unwrap();
    let report = profile(
        &sim.registry.diagnosis_keys(),
        &sim.all_captures(),
        ProfileConfig::default(),
    )
    .unwrap();
    let tol = i64::from(scenario.advertise_period_s);
    let mut checked = 0;
    for visit in sim
        .truth
        .visits
        .iter()
        .filter(|v| sim.registry.diagnosed.contains(&v.agent))
    {
        let subjects: Vec<Subject> = sim.registry.keys_of(&visit.agent).iter().map(Subject::of).collect();
        let seg = report
            .segments
            .iter()
            .find(|s| {
                subjects.contains(&s.subject)
                    && s.station_id == visit.station
                    && s.first_seen < visit.depart
                    && s.last_seen > visit.arrive
            })
            .unwrap_or_else(|| panic!("no segment for {visit:?}"));
        assert!(
            (seg.first_seen - visit.arrive).abs() <= tol,
            "{visit:?} arrive vs {}",
            seg.first_seen
        );
        assert!(
            (seg.last_seen - visit.depart).abs() <= tol,
            "{visit:?} depart vs {}",
            seg.last_seen
        );
        checked += 1;
    }
    assert_eq!(checked, report.segments.len());
}

#[test]
fn fig5_visits_reconstruct_within_one_period() {
    for seed in [1, 7, 42] {
        check_visits(&fig5_scenario(seed));
    }
}

#[test]
fn two_day_routines_reconstruct_within_one_period() {
    // The one-period bound assumes every advertisement is heard; this
    // scenario normally drops a fifth of them.
    let mut s = commuter_scenario(7);
    s.rx_probability = 1.0;
    check_visits(&s);
}

#[test]
fn bystanders_are_never_attributed() {
    let sim = run_scenario(&fig5_scenario(7)).unwrap();
    let report = profile(
        &sim.registry.diagnosis_keys(),
        &sim.all_captures(),
        ProfileConfig::default(),
    )
    .unwrap();
    let passerby: Vec<Subject> = sim.registry.keys_of("Passerby").iter().map(Subject::of).collect();
    assert!(!passerby.is_empty());
    assert!(report.sightings.iter().all(|s| !passerby.contains(&s.subject)));
    assert_eq!(report.records_read - report.sightings.len(), 750);
}
