//! Canned scenarios.

use super::{Agent, Scenario, Station, Stop};

/// 2020-07-07 00:00:00 UTC.
pub const FIG5_DAY_START: i64 = 1_594_080_000;

fn at(day_start: i64, h: i64, m: i64) -> i64 {
    day_start + h * 3600 + m * 60
}

fn stop(day_start: i64, station: &str, from: (i64, i64), to: (i64, i64)) -> Stop {
    Stop::new(station, at(day_start, from.0, from.1), at(day_start, to.0, to.1))
}

fn city_stations() -> Vec<Station> {
    vec![
        Station::new("A", "A residential area", (0.0, 0.0), 6.0),
        Station::new("B", "City hall", (800.0, 300.0), 6.0),
        Station::new("C", "Police station", (600.0, -400.0), 6.0),
        Station::new("D", "Clinic and pharmacy", (250.0, -600.0), 6.0),
        Station::new("E", "Outside a pub", (1200.0, 500.0), 6.0),
        Station::new(
            "F",
            "Outside a head shop and a sports gambling bookmaker",
            (1600.0, 900.0),
            6.0,
        ),
    ]
}

/// Two diagnosed users walking through six sniffer stations on one day.
///
/// User 1: A, D, C, B, E, back to A. User 2: B, E, F. Both leave B at the
/// same time and share their whole stay at E.
pub fn fig5_scenario(seed: u64) -> Scenario {
    let d = FIG5_DAY_START;
    let user1 = Agent::new(
        "User 1",
        vec![
            stop(d, "A", (8, 0), (8, 40)),
            stop(d, "D", (9, 0), (9, 30)),
            stop(d, "C", (9, 50), (10, 10)),
            stop(d, "B", (10, 30), (11, 30)),
            stop(d, "E", (12, 0), (13, 30)),
            stop(d, "A", (14, 0), (15, 0)),
        ],
    )
    .diagnosed(5);
    let user2 = Agent::new(
        "User 2",
        vec![
            stop(d, "B", (10, 45), (11, 30)),
            stop(d, "E", (12, 0), (13, 30)),
            stop(d, "F", (14, 0), (14, 30)),
        ],
    )
    .diagnosed(5);
    let passerby = Agent::new(
        "Passerby",
        vec![stop(d, "B", (11, 0), (11, 20)), stop(d, "C", (12, 0), (12, 5))],
    );
    Scenario {
        name: "fig5".into(),
        stations: city_stations(),
        agents: vec![user1, user2, passerby],
        start: d,
        end: d + 86400,
        advertise_period_s: 2,
        rx_probability: 1.0,
        seed,
    }
}

/// Two diagnosed people repeating their own routine on two consecutive days.
///
/// The commuter goes A to B in the morning and back in the evening; the
/// shopper goes D, F, E around midday.
pub fn commuter_scenario(seed: u64) -> Scenario {
    let mut agents = Vec::new();
    let mut commuter = Vec::new();
    let mut shopper = Vec::new();
    for day in 0..2 {
        let d = FIG5_DAY_START + day * 86400;
        commuter.extend([
            stop(d, "A", (7, 15 + day * 5), (7, 45)),
            stop(d, "B", (8, 10), (12, 0)),
            stop(d, "C", (12, 20), (12, 50)),
            stop(d, "B", (13, 10), (17, day * 10)),
            stop(d, "A", (17, 40), (18, 30)),
        ]);
        shopper.extend([
            stop(d, "D", (10, 30 - day * 10), (11, 0)),
            stop(d, "F", (11, 30), (12, 30)),
            stop(d, "E", (13, 0), (14, 30 + day * 15)),
        ]);
    }
    agents.push(Agent::new("Commuter", commuter).diagnosed(3));
    agents.push(Agent::new("Shopper", shopper).diagnosed(3));
    Scenario {
        name: "commuter".into(),
        stations: city_stations(),
        agents,
        start: FIG5_DAY_START,
        end: FIG5_DAY_START + 2 * 86400,
        advertise_period_s: 2,
        rx_probability: 0.8,
        seed,
    }
}
