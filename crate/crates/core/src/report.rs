//! Output formats: the trace CSV and the gains document.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::numerics::{self, Matrix};
use crate::runtime::{ClosedLoopTrace, Initialization};

/// `k,t,norm_x,norm_ebar,norm_e_1..norm_e_N,rounds_used`.
pub fn csv_header(nodes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["k", "t", "norm_x", "norm_ebar"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=nodes).map(|i| format!("norm_e_{i}")));
    h.push("rounds_used".into());
    h
}

/// Writes the trace; the header is emitted even for an empty trace.
pub fn write_trace_csv<W: Write>(trace: &ClosedLoopTrace, nodes: usize, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(nodes))?;
    for r in &trace.rows {
        let mut rec = vec![r.k.to_string(), r.t.to_string(), r.norm_x.to_string(), r.norm_ebar.to_string()];
        rec.extend(r.norm_e.iter().map(f64::to_string));
        rec.push(r.rounds_used.to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainsReport {
    pub scenario: String,
    pub m_bar: usize,
    pub diameter_bound: usize,
    pub degrees: Vec<usize>,
    pub leader: usize,
    /// `K_i` per agent, as row arrays.
    pub k: Vec<Vec<Vec<f64>>>,
    /// `L_i` per agent, as row arrays.
    pub l: Vec<Vec<Vec<f64>>>,
    /// `[re, im]` pairs, largest modulus first.
    pub controller_spectrum: Vec<[f64; 2]>,
    pub observer_spectrum: Vec<[f64; 2]>,
    pub controller_visit_order: Vec<usize>,
    pub observer_visit_order: Vec<usize>,
    pub controller_hops: usize,
    pub observer_hops: usize,
}

fn spectrum(m: &Matrix) -> Vec<[f64; 2]> {
    numerics::eigenvalues_sorted(m)
        .map(|v| v.into_iter().map(|z| [z.re, z.im]).collect())
        .unwrap_or_default()
}

impl GainsReport {
    pub fn new(scenario: &str, init: &Initialization) -> Self {
        Self {
            scenario: scenario.to_string(),
            m_bar: init.m_bar,
            diameter_bound: init.diameter_bound,
            degrees: init.degrees.clone(),
            leader: init.election.leader,
            k: init.k_gains().iter().map(numerics::matrix_to_rows).collect(),
            l: init.l_gains().iter().map(numerics::matrix_to_rows).collect(),
            controller_spectrum: spectrum(init.controller_matrix()),
            observer_spectrum: spectrum(init.observer_matrix()),
            controller_visit_order: init.control.visit_order.clone(),
            observer_visit_order: init.observer.visit_order.clone(),
            controller_hops: init.control.hop_count,
            observer_hops: init.observer.hop_count,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary for the terminal.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "scenario {}\nm̄ = {}\nD′ = {}\nminimal-polynomial degrees {:?}\nleader {}\n",
            self.scenario, self.m_bar, self.diameter_bound, self.degrees, self.leader
        );
        for (i, k) in self.k.iter().enumerate() {
            s.push_str(&format!("K_{} = {}\n", i + 1, fmt_matrix(k)));
        }
        for (i, l) in self.l.iter().enumerate() {
            s.push_str(&format!("L_{} = {}\n", i + 1, fmt_matrix(l)));
        }
        s.push_str(&format!("eig(A + ΣB_iK_i) = {}\n", fmt_spectrum(&self.controller_spectrum)));
        s.push_str(&format!("eig(A − ΣL_iC_i/N) = {}\n", fmt_spectrum(&self.observer_spectrum)));
        s.push_str(&format!(
            "token visits: controller {:?} ({} hops), observer {:?} ({} hops)\n",
            self.controller_visit_order, self.controller_hops, self.observer_visit_order, self.observer_hops
        ));
        s
    }
}

fn fmt_matrix(rows: &[Vec<f64>]) -> String {
    let rows: Vec<String> = rows
        .iter()
        .map(|r| r.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" "))
        .collect();
    format!("[{}]", rows.join("; "))
}

fn fmt_spectrum(z: &[[f64; 2]]) -> String {
    let parts: Vec<String> = z
        .iter()
        .map(|[re, im]| if *im == 0.0 { format!("{re:.4}") } else { format!("{re:.4}{im:+.4}i") })
        .collect();
    format!("{{{}}}", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{initialize, run_closed_loop};
    use crate::scenario::paper_4node;

    #[test]
    fn header_always_written() {
        let trace = ClosedLoopTrace { tau: 1.0, m_bar: 3, rows: Vec::new() };
        let mut buf = Vec::new();
        write_trace_csv(&trace, 2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,t,norm_x,norm_ebar,norm_e_1,norm_e_2,rounds_used\n");
    }

    #[test]
    fn csv_rows_and_gains_round_trip() {
        let sc = paper_4node().build().unwrap();
        let init = initialize(&sc.setup).unwrap();
        let trace = run_closed_loop(&sc.setup, &init, &sc.x0, &sc.x_hat0, 3, 1.0).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&trace, 4, &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rd.headers().unwrap().len(), 4 + 4 + 1);
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[2][1].parse::<f64>().unwrap(), 2.0 * (init.m_bar as f64 + 1.0));
        assert_eq!(rows[1][2].parse::<f64>().unwrap(), trace.rows[1].norm_x);

        let report = GainsReport::new("paper-4node", &init);
        let back: GainsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_text().contains("leader 0"));
        assert_eq!(report.k.len(), 4);
        assert_eq!(report.l[0].len(), 8);
    }
}
