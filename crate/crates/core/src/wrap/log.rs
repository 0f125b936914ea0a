use std::fmt::Write;

/// Per-example record of equizero's choice.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GStarLog {
    rows: Vec<(String, usize, Vec<f64>)>,
}

impl GStarLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, example_id: impl Into<String>, g_star: usize, losses: &[f64]) {
        self.rows.push((example_id.into(), g_star, losses.to_vec()));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fraction of rows that picked each element.
    pub fn histogram(&self, order: usize) -> Vec<f64> {
        let mut h = vec![0.0; order];
        for (_, g, _) in &self.rows {
            if *g < order {
                h[*g] += 1.0;
            }
        }
        let n = self.rows.len().max(1) as f64;
        h.iter().map(|c| c / n).collect()
    }

    /// `example_id,g_star,loss_g0,loss_g1,...`
    pub fn to_csv(&self) -> String {
        let width = self.rows.iter().map(|r| r.2.len()).max().unwrap_or(0);
        let mut s = String::from("example_id,g_star");
        for g in 0..width {
            let _ = write!(s, ",loss_g{g}");
        }
        s.push('\n');
        for (id, g, losses) in &self.rows {
            let _ = write!(s, "{id},{g}");
            for l in losses {
                let _ = write!(s, ",{l}");
            }
            s.push('\n');
        }
        s
    }
}
