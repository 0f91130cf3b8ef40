use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Outcome of one empirical estimate check: `ratio = lhs / rhs` per sample.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimateReport {
    pub name: String,
    pub n_samples: usize,
    pub worst_ratio: f64,
    pub median_ratio: f64,
    pub pass: bool,
    pub params: Map<String, Value>,
    #[serde(skip)]
    pub ratios: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl EstimateReport {
    pub fn new(name: impl Into<String>, n_samples: usize, ratios: Vec<f64>) -> Self {
        let worst = ratios.iter().cloned().fold(f64::NEG_INFINITY, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) });
        EstimateReport {
            name: name.into(),
            n_samples,
            worst_ratio: if ratios.is_empty() { f64::NAN } else { worst },
            median_ratio: median(&ratios),
            pass: false,
            params: Map::new(),
            ratios,
        }
    }

    /// Pass iff every ratio is at most `bound`.
    pub fn bounded_by(mut self, bound: f64) -> Self {
        self.pass = self.worst_ratio.is_finite() && self.worst_ratio <= bound;
        self.params.insert("bound".into(), bound.into());
        self
    }

    /// Pass iff the worst ratio is finite. Marks the report as an implicit-constant
    /// estimate, which [`refinement_report`] can gate on grid stability.
    pub fn finite(mut self) -> Self {
        self.pass = self.worst_ratio.is_finite();
        self.params.insert("constant".into(), "implicit".into());
        self
    }

    pub fn is_implicit(&self) -> bool {
        self.params.get("constant").and_then(Value::as_str) == Some("implicit")
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    pub fn with_pass(mut self, pass: bool) -> Self {
        self.pass = pass;
        self
    }
}

/// `|coarse / fine - 1| <= tol` on worst constants from two resolutions.
pub fn refinement_stable(coarse: f64, fine: f64, tol: f64) -> bool {
    coarse.is_finite() && fine.is_finite() && fine > 0.0 && (coarse / fine - 1.0).abs() <= tol
}

/// Merge a coarse/fine pair of the same experiment into one report gated on stability.
pub fn refinement_report(coarse: &EstimateReport, fine: &EstimateReport, tol: f64) -> EstimateReport {
    let stable = refinement_stable(coarse.worst_ratio, fine.worst_ratio, tol);
    let mut r = fine.clone();
    r.name = format!("{}/refinement", fine.name);
    r.pass = coarse.pass && fine.pass && stable;
    r.params.insert("coarse_worst".into(), coarse.worst_ratio.into());
    r.params.insert("fine_worst".into(), fine.worst_ratio.into());
    r.params.insert("stability_tol".into(), tol.into());
    r
}

pub fn write_reports_csv(reports: &[EstimateReport], out: impl std::io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["experiment", "param", "worst", "median", "pass"])?;
    for r in reports {
        let param: Vec<String> = r
            .params
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                other => format!("{k}={other}"),
            })
            .collect();
        w.write_record([
            r.name.clone(),
            param.join(";"),
            format!("{:.9e}", r.worst_ratio),
            format!("{:.9e}", r.median_ratio),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_worst() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        let r = EstimateReport::new("x", 3, vec![0.5, 2.0, 1.0]);
        assert_eq!((r.worst_ratio, r.median_ratio), (2.0, 1.0));
        assert!(EstimateReport::new("x", 1, vec![1.0, f64::NAN]).worst_ratio.is_nan());
    }

    #[test]
    fn pass_rules() {
        let r = EstimateReport::new("x", 2, vec![1.0, 1.0 + 1e-7]);
        assert!(r.clone().bounded_by(1.0 + 1e-6).pass);
        assert!(!r.clone().bounded_by(1.0).pass);
        assert!(r.clone().finite().is_implicit());
        assert!(!EstimateReport::new("x", 0, vec![]).finite().pass);
        assert!(!EstimateReport::new("x", 1, vec![f64::INFINITY]).finite().pass);
    }

    #[test]
    fn refinement_gate() {
        assert!(refinement_stable(1.1, 1.0, 0.2));
        assert!(!refinement_stable(1.3, 1.0, 0.2));
        assert!(!refinement_stable(1.0, 0.0, 0.2));
        let c = EstimateReport::new("e", 1, vec![1.0]).finite();
        let f = EstimateReport::new("e", 1, vec![2.0]).finite();
        let r = refinement_report(&c, &f, 0.2);
        assert_eq!(r.name, "e/refinement");
        assert!(!r.pass);
        assert!(refinement_report(&c, &c, 0.2).pass);
    }

    #[test]
    fn csv_quotes_params() {
        let r = EstimateReport::new("a,b", 1, vec![0.25]).bounded_by(1.0).param("note", "x,y");
        let mut buf = Vec::new();
        write_reports_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let row = rdr.records().next().unwrap().unwrap();
        assert_eq!(&row[0], "a,b");
        assert_eq!(&row[1], "bound=1.0;note=x,y");
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.25);
        assert_eq!(&row[4], "true");
    }
}
