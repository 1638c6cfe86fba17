//! Overlap metrics and table-shaped CSV reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Which voxels a Dice score is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiceTarget {
    /// A single label, 1..=5.
    Label(u8),
    /// All lumbar labels pooled into one foreground class.
    Lumbar,
}

impl DiceTarget {
    #[inline]
    fn hit(self, v: u8) -> bool {
        match self {
            DiceTarget::Label(k) => v == k,
            DiceTarget::Lumbar => v != 0,
        }
    }
}

/// Dice coefficient as a percentage; 100 when both masks are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, target: DiceTarget) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("dims {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ha, hb) = (target.hit(a), target.hit(b));
        p += ha as usize;
        g += hb as usize;
        both += (ha && hb) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

/// Mean axial index of each lumbar label (index 0 = L1), `None` if absent.
pub fn label_centroids_z(l: &LabelVolume) -> [Option<f64>; 5] {
    let mut sum = [0.0; 5];
    let mut n = [0usize; 5];
    for (idx, &v) in l.data().iter().enumerate() {
        if (1..=5).contains(&v) {
            sum[v as usize - 1] += l.coords(idx)[2] as f64;
            n[v as usize - 1] += 1;
        }
    }
    std::array::from_fn(|i| (n[i] > 0).then(|| sum[i] / n[i] as f64))
}

/// True when all five labels are present and L1 sits strictly above L2 and so on.
pub fn labels_ordered(l: &LabelVolume) -> bool {
    let z = label_centroids_z(l);
    z.iter().all(Option::is_some) && z.windows(2).all(|w| w[0].unwrap() > w[1].unwrap())
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseDice {
    pub case_id: String,
    /// L1..L5, percent.
    pub per_label: [f64; 5],
    pub lumbar: f64,
}

impl CaseDice {
    /// Columns in table order: L1..L5 then Lumbar.
    pub fn columns(&self) -> [f64; 6] {
        let mut c = [0.0; 6];
        c[..5].copy_from_slice(&self.per_label);
        c[5] = self.lumbar;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub cases: Vec<CaseDice>,
}

pub const COLUMNS: [&str; 6] = ["L1", "L2", "L3", "L4", "L5", "Lumbar"];

impl DiceReport {
    /// Per-column (mean, std) in table order.
    pub fn summary(&self) -> [(f64, f64); 6] {
        std::array::from_fn(|c| mean_std(&self.cases.iter().map(|d| d.columns()[c]).collect::<Vec<_>>()))
    }

    /// Mean over cases of the average per-label Dice.
    pub fn mean_label_dice(&self) -> f64 {
        mean_std(
            &self
                .cases
                .iter()
                .map(|c| c.per_label.iter().sum::<f64>() / 5.0)
                .collect::<Vec<_>>(),
        )
        .0
    }

    pub fn mean_lumbar_dice(&self) -> f64 {
        self.summary()[5].0
    }

    /// `case,label,dice` rows followed by one `mean,std` footer per column.
    pub fn csv_long(&self) -> String {
        let mut s = String::from("case,label,dice\n");
        for c in &self.cases {
            for (name, v) in COLUMNS.iter().zip(c.columns()) {
                let _ = writeln!(s, "{},{},{:.4}", c.case_id, name, v);
            }
        }
        s.push_str("# footer: label,mean,std (population std)\n");
        for (name, (m, sd)) in COLUMNS.iter().zip(self.summary()) {
            let _ = writeln!(s, "{name},{m:.4},{sd:.4}");
        }
        s
    }

    /// One row per case with columns L1..L5, Lumbar, then mean and std rows.
    pub fn csv_table(&self) -> String {
        let mut s = format!("case,{}\n", COLUMNS.join(","));
        for c in &self.cases {
            let cols: Vec<String> = c.columns().iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "{},{}", c.case_id, cols.join(","));
        }
        let summary = self.summary();
        let means: Vec<String> = summary.iter().map(|(m, _)| format!("{m:.4}")).collect();
        let stds: Vec<String> = summary.iter().map(|(_, sd)| format!("{sd:.4}")).collect();
        let _ = writeln!(s, "mean,{}", means.join(","));
        let _ = writeln!(s, "std,{}", stds.join(","));
        s
    }
}

pub fn case_dice(case_id: &str, pred: &LabelVolume, gt: &LabelVolume) -> Result<CaseDice> {
    let mut per_label = [0.0; 5];
    for (k, d) in per_label.iter_mut().enumerate() {
        *d = dice(pred, gt, DiceTarget::Label(k as u8 + 1))?;
    }
    Ok(CaseDice {
        case_id: case_id.to_string(),
        per_label,
        lumbar: dice(pred, gt, DiceTarget::Lumbar)?,
    })
}

pub fn report(preds: &[LabelVolume], gts: &[LabelVolume], case_ids: &[String]) -> Result<DiceReport> {
    if preds.len() != gts.len() || preds.len() != case_ids.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} ground truths, {} case ids",
            preds.len(),
            gts.len(),
            case_ids.len()
        )));
    }
    let cases = preds
        .iter()
        .zip(gts)
        .zip(case_ids)
        .map(|((p, g), id)| case_dice(id, p, g))
        .collect::<Result<_>>()?;
    Ok(DiceReport { cases })
}

/// `case,sensitivity` rows plus a `mean` row.
pub fn sensitivity_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("case,sensitivity\n");
    for (id, v) in rows {
        let _ = writeln!(s, "{id},{v:.6}");
    }
    let (m, _) = mean_std(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let _ = writeln!(s, "mean,{m:.6}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<u8>) -> LabelVolume {
        LabelVolume::new([data.len(), 1, 1], [1.0; 3], data).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = vol(vec![1, 1, 0, 2]);
        assert_eq!(dice(&a, &a, DiceTarget::Label(1)).unwrap(), 100.0);
        let b = vol(vec![0, 0, 1, 0]);
        assert_eq!(dice(&a, &b, DiceTarget::Label(1)).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, DiceTarget::Label(4)).unwrap(), 100.0);
        // |P| = |G| = 100, overlap 80
        let p: Vec<u8> = (0..200).map(|i| u8::from(i < 100)).collect();
        let g: Vec<u8> = (0..200).map(|i| u8::from((20..120).contains(&i))).collect();
        assert_eq!(dice(&vol(p), &vol(g), DiceTarget::Label(1)).unwrap(), 80.0);
        assert!(dice(&a, &vol(vec![0; 3]), DiceTarget::Lumbar).is_err());
    }

    #[test]
    fn pooled_lumbar_ignores_label_identity() {
        let a = vol(vec![1, 2, 3, 0]);
        let b = vol(vec![5, 4, 3, 0]);
        assert_eq!(dice(&a, &b, DiceTarget::Lumbar).unwrap(), 100.0);
        assert_eq!(dice(&a, &b, DiceTarget::Label(3)).unwrap(), 100.0);
        assert_eq!(dice(&a, &b, DiceTarget::Label(1)).unwrap(), 0.0);
    }

    #[test]
    fn two_point_statistics() {
        assert_eq!(mean_std(&[80.0, 100.0]), (90.0, 10.0));
    }

    #[test]
    fn report_csv_layout() {
        let a = vol(vec![1, 2, 3, 4, 5, 0]);
        let r = report(&[a.clone()], &[a], &["c1".into()]).unwrap();
        for (m, s) in r.summary() {
            assert_eq!((m, s), (100.0, 0.0));
        }
        let t = r.csv_table();
        assert_eq!(t.lines().next().unwrap(), "case,L1,L2,L3,L4,L5,Lumbar");
        assert!(t.contains("\nmean,100.0000,"));
        let l = r.csv_long();
        assert!(l.starts_with("case,label,dice\nc1,L1,100.0000\n"));
        assert!(l.contains("Lumbar,100.0000,0.0000"));
        let s = sensitivity_csv(&[("a".into(), 1.0), ("b".into(), 0.5)]);
        assert!(s.ends_with("mean,0.750000\n"));
    }
}
