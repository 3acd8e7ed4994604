//! Report files. Output depends only on the report, so re-runs are
//! byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::DateTime;

use super::{timelines, ProfileReport};

type Writer = fn(&ProfileReport, &mut BufWriter<fs::File>) -> io::Result<()>;

pub const REPORT_FILES: [&str; 4] = ["timeline.csv", "routes.txt", "social.dot", "plotdata.csv"];

fn utc(t: i64) -> String {
    DateTime::from_timestamp(t, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| t.to_string())
}

fn write_timeline(report: &ProfileReport, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "subject,station,first_seen,last_seen,first_utc,last_utc,sightings")?;
    for s in &report.segments {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.subject,
            s.station_id,
            s.first_seen,
            s.last_seen,
            utc(s.first_seen),
            utc(s.last_seen),
            s.sighting_count
        )?;
    }
    Ok(())
}

fn write_routes(report: &ProfileReport, out: &mut impl Write) -> io::Result<()> {
    for (subject, line) in timelines(&report.segments) {
        let stops: Vec<String> = line
            .iter()
            .map(|s| {
                format!(
                    "{}[{}-{}]",
                    s.station_id,
                    &utc(s.first_seen)[11..16],
                    &utc(s.last_seen)[11..16]
                )
            })
            .collect();
        writeln!(out, "{subject}: {}", report.routes[&subject].join(" -> "))?;
        writeln!(out, "  {}", stops.join(" "))?;
    }
    let links = report.links.links(report.config.link_threshold);
    if !links.is_empty() {
        writeln!(out)?;
        writeln!(
            out,
            "# cross-day links (similarity >= {})",
            report.config.link_threshold
        )?;
        for l in links {
            writeln!(out, "{} ~ {} {:.3}", l.earlier, l.later, l.similarity)?;
        }
    }
    Ok(())
}

fn write_dot(report: &ProfileReport, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "graph social {{")?;
    for subject in report.routes.keys() {
        writeln!(out, "  \"{subject}\";")?;
    }
    for e in &report.edges {
        let shared: Vec<&str> = e.shared_stations.iter().map(String::as_str).collect();
        writeln!(
            out,
            "  \"{}\" -- \"{}\" [label=\"{} ({} s)\", weight={}];",
            e.a,
            e.b,
            shared.join(","),
            e.overlap_s,
            e.overlap_s
        )?;
    }
    writeln!(out, "}}")
}

/// One point per subject, station and minute: the station-versus-time series.
fn write_plotdata(report: &ProfileReport, out: &mut impl Write) -> io::Result<()> {
    let stations: Vec<&str> = report
        .sightings
        .iter()
        .map(|s| s.station_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let points: BTreeSet<_> = report
        .sightings
        .iter()
        .map(|s| (s.subject, s.timestamp.div_euclid(60) * 60, s.station_id.as_str()))
        .collect();
    writeln!(out, "subject,minute,minute_utc,station,station_index")?;
    for (subject, minute, station) in points {
        let idx = stations.binary_search(&station).unwrap_or(0);
        writeln!(out, "{subject},{minute},{},{station},{idx}", utc(minute))?;
    }
    Ok(())
}

/// Writes the four report files into `dir`, creating it if needed.
pub fn emit_report(report: &ProfileReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let writers: [Writer; 4] = [write_timeline, write_routes, write_dot, write_plotdata];
    let mut paths = Vec::new();
    for (name, write) in REPORT_FILES.iter().zip(writers) {
        let path = dir.join(name);
        let mut out = BufWriter::new(fs::File::create(&path)?);
        write(report, &mut out)?;
        out.flush()?;
        paths.push(path);
    }
    Ok(paths)
}
