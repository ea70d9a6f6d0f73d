//! CSV encodings for distributions, tables and curves.
//!
//! Floats are written with 9 significant digits so files are stable across
//! platforms and survive a parse/serialize round trip byte for byte.

use std::io::{Read, Write};

use crate::discrimination::{Outcome, OutcomeTable};
use crate::error::{QsdError, Result};
use crate::network::{Sink, SinkTable, TimeBinnedDistribution};

/// Formats `x` with 9 significant digits: positional notation for
/// `1e-4 <= |x| < 1e9`, scientific otherwise.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci
        .rsplit_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .expect("scientific float formatting");
    if (-4..9).contains(&exp) {
        let prec = (8 - exp) as usize;
        format!("{x:.prec$}")
    } else {
        sci
    }
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| QsdError::InvalidArgument(format!("cannot parse {what} from {field:?}")))
}

fn parse_usize(field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| QsdError::InvalidArgument(format!("cannot parse {what} from {field:?}")))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(r)
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(QsdError::InvalidArgument(format!(
            "expected CSV header {}, found {}",
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

/// `bin_index,p_sink5,p_sink6` rows followed by `residual,<value>,`.
pub fn write_distribution_csv(d: &TimeBinnedDistribution, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["bin_index", "p_sink5", "p_sink6"])?;
    for (k, [p5, p6]) in d.bins().iter().enumerate() {
        wtr.write_record([(k + 1).to_string(), fmt_f64(*p5), fmt_f64(*p6)])?;
    }
    wtr.write_record(["residual".to_string(), fmt_f64(d.residual()), String::new()])?;
    wtr.flush()?;
    Ok(())
}

pub fn read_distribution_csv(r: impl Read) -> Result<TimeBinnedDistribution> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &["bin_index", "p_sink5", "p_sink6"])?;
    let mut bins = Vec::new();
    let mut residual = None;
    for rec in rdr.records() {
        let rec = rec?;
        let first = rec.get(0).unwrap_or_default();
        if first == "residual" {
            residual = Some(parse_f64(rec.get(1).unwrap_or_default(), "residual")?);
            continue;
        }
        if residual.is_some() {
            return Err(QsdError::InvalidArgument("rows after the residual row".into()));
        }
        let k = parse_usize(first, "bin_index")?;
        if k != bins.len() + 1 {
            return Err(QsdError::InvalidArgument(format!("bin_index {k} out of order")));
        }
        bins.push([
            parse_f64(rec.get(1).unwrap_or_default(), "p_sink5")?,
            parse_f64(rec.get(2).unwrap_or_default(), "p_sink6")?,
        ]);
    }
    let residual =
        residual.ok_or_else(|| QsdError::InvalidArgument("missing residual row".into()))?;
    TimeBinnedDistribution::new(bins, residual, false)
}

/// Per-step sink table, `bin_index,p_sink5,p_sink6`.
pub fn write_sink_table_csv(t: &SinkTable, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["bin_index", "p_sink5", "p_sink6"])?;
    for (step, [p5, p6]) in t.steps.iter().zip(&t.probs) {
        wtr.write_record([step.to_string(), fmt_f64(*p5), fmt_f64(*p6)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_sink_table_csv(r: impl Read) -> Result<SinkTable> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &["bin_index", "p_sink5", "p_sink6"])?;
    let mut steps = Vec::new();
    let mut probs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        steps.push(parse_usize(&rec[0], "bin_index")?);
        probs.push([parse_f64(&rec[1], "p_sink5")?, parse_f64(&rec[2], "p_sink6")?]);
    }
    Ok(SinkTable { steps, probs })
}

/// One value per step, `bin_index,<column>`.
pub fn write_series_csv(
    column: &str,
    steps: &[usize],
    values: &[f64],
    w: impl Write,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["bin_index", column])?;
    for (k, v) in steps.iter().zip(values) {
        wtr.write_record([k.to_string(), fmt_f64(*v)])?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_outcome(name: &str) -> Result<Outcome> {
    let bad = || QsdError::InvalidArgument(format!("bad outcome column {name:?}"));
    let rest = name.strip_prefix('s').ok_or_else(bad)?;
    let (node, step) = rest.split_once("_t").ok_or_else(bad)?;
    let sink = node
        .parse()
        .ok()
        .and_then(Sink::from_node)
        .ok_or_else(bad)?;
    let step = step.parse().map_err(|_| bad())?;
    Ok(Outcome { sink, step })
}

/// Hypothesis rows by outcome columns named `s<sink>_t<step>`.
pub fn write_outcome_table_csv(
    table: &OutcomeTable,
    labels: &[String],
    w: impl Write,
) -> Result<()> {
    if labels.len() != table.n_hypotheses() {
        return Err(QsdError::Shape(format!(
            "{} labels for {} hypotheses",
            labels.len(),
            table.n_hypotheses()
        )));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["hypothesis".to_string()];
    header.extend(table.outcomes().iter().map(Outcome::to_string));
    wtr.write_record(&header)?;
    for (label, row) in labels.iter().zip(table.rows()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|p| fmt_f64(*p)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_outcome_table_csv(r: impl Read) -> Result<(Vec<String>, OutcomeTable)> {
    let mut rdr = reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("hypothesis") {
        return Err(QsdError::InvalidArgument(
            "outcome table header must start with `hypothesis`".into(),
        ));
    }
    let outcomes = header
        .iter()
        .skip(1)
        .map(parse_outcome)
        .collect::<Result<Vec<_>>>()?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        labels.push(rec[0].to_string());
        rows.push(
            rec.iter()
                .skip(1)
                .map(|f| parse_f64(f, "probability"))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((labels, OutcomeTable::new(outcomes, rows)?))
}

/// One row of an error-scaling curve. Absent columns are written empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub m: u64,
    pub exact: Option<f64>,
    pub montecarlo: Option<f64>,
    pub montecarlo_se: Option<f64>,
}

const SCALING_HEADER: [&str; 4] = ["m", "p_err_exact", "p_err_montecarlo", "montecarlo_std_error"];

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_scaling_csv(rows: &[ScalingRow], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SCALING_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.m.to_string(),
            opt(r.exact),
            opt(r.montecarlo),
            opt(r.montecarlo_se),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_scaling_csv(r: impl Read) -> Result<Vec<ScalingRow>> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &SCALING_HEADER)?;
    let parse_opt = |f: &str, what| -> Result<Option<f64>> {
        if f.is_empty() {
            Ok(None)
        } else {
            parse_f64(f, what).map(Some)
        }
    };
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ScalingRow {
                m: parse_usize(&rec[0], "m")? as u64,
                exact: parse_opt(&rec[1], "p_err_exact")?,
                montecarlo: parse_opt(&rec[2], "p_err_montecarlo")?,
                montecarlo_se: parse_opt(&rec[3], "montecarlo_std_error")?,
            })
        })
        .collect()
}

/// Optimizer convergence trace, `restart,iteration,objective`.
pub fn write_trace_csv(trace: &[(usize, usize, f64)], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["restart", "iteration", "objective"])?;
    for (r, i, obj) in trace {
        wtr.write_record([r.to_string(), i.to_string(), fmt_f64(*obj)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trace_csv(r: impl Read) -> Result<Vec<(usize, usize, f64)>> {
    let mut rdr = reader(r);
    check_header(&mut rdr, &["restart", "iteration", "objective"])?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok((
                parse_usize(&rec[0], "restart")?,
                parse_usize(&rec[1], "iteration")?,
                parse_f64(&rec[2], "objective")?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(0.5), "0.500000000");
        assert_eq!(fmt_f64(0.8535533905932737), "0.853553391");
        assert_eq!(fmt_f64(-1.5), "-1.50000000");
        assert_eq!(fmt_f64(9.9999999999), "10.0000000");
        assert_eq!(fmt_f64(1e-5), "1.00000000e-5");
        assert_eq!(fmt_f64(2.5e9), "2.50000000e9");
        assert_eq!(fmt_f64(123456789.4), "123456789");
        assert_eq!(fmt_f64(0.00012345678912), "0.000123456789");
    }

    #[test]
    fn formatted_floats_are_fixed_points() {
        for x in [0.1, 1.0 / 3.0, 7.5e-7, 12345.678901, -0.0731, 1e20] {
            let s = fmt_f64(x);
            assert_eq!(fmt_f64(s.parse().unwrap()), s);
        }
    }

    #[test]
    fn distribution_round_trip_is_byte_identical() {
        let d = TimeBinnedDistribution::new(
            vec![[0.25, 0.125], [1.0 / 12.0, 1.0 / 6.0]],
            1.0 - 0.375 - 0.25,
            false,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_distribution_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("bin_index,p_sink5,p_sink6\n1,0.250000000,0.125000000\n"));
        assert!(text.ends_with("residual,0.375000000,\n"));
        let back = read_distribution_csv(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_distribution_csv(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn outcome_table_round_trip() {
        let outcomes = vec![
            Outcome { sink: Sink::S5, step: 1 },
            Outcome { sink: Sink::S6, step: 1 },
        ];
        let t = OutcomeTable::new(outcomes, vec![vec![0.3, 0.7], vec![1.0, 0.0]]).unwrap();
        let labels = vec!["a".to_string(), "b".to_string()];
        let mut buf = Vec::new();
        write_outcome_table_csv(&t, &labels, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("hypothesis,s5_t1,s6_t1\n"));
        let (l2, t2) = read_outcome_table_csv(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_outcome_table_csv(&t2, &l2, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn scaling_and_trace_round_trip() {
        let rows = vec![
            ScalingRow { m: 1, exact: Some(0.5), montecarlo: None, montecarlo_se: None },
            ScalingRow { m: 7, exact: None, montecarlo: Some(0.11), montecarlo_se: Some(1e-5) },
        ];
        let mut buf = Vec::new();
        write_scaling_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_scaling_csv(buf.as_slice()).unwrap(), rows);

        let trace = vec![(0, 0, 0.75), (0, 1, 0.5)];
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn header_mismatch_is_reported() {
        let err = read_distribution_csv("bin,p5,p6\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("bin_index"));
    }
}
