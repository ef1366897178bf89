use super::{DatasetBundle, Split, WindowSample};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Historical-average forecasts for `windows` of `split`: each target day gets
/// the mean of all days before the split that share its day of week.
pub fn ha_baseline(bundle: &DatasetBundle, split: Split, windows: &[WindowSample]) -> Result<Vec<Tensor>> {
    let start = bundle.splits.range(split, bundle.days()).start;
    if start < 7 {
        return Err(Error::invalid(format!(
            "HA needs a full week of history before the {split} split, found {start} days"
        )));
    }
    let cols = bundle.n() * bundle.c();
    let mut means = vec![0.0; 7 * cols];
    let mut counts = [0usize; 7];
    // running means reproduce a repeated value exactly
    for d in 0..start {
        let dow = d % 7;
        counts[dow] += 1;
        let k = counts[dow] as f64;
        for (mean, v) in means[dow * cols..(dow + 1) * cols]
            .iter_mut()
            .zip(&bundle.flow.data()[d * cols..(d + 1) * cols])
        {
            *mean += (v - *mean) / k;
        }
    }
    Ok(windows
        .iter()
        .map(|w| {
            let s = w.target.shape()[0];
            let mut out = Vec::with_capacity(s * cols);
            for step in 1..=s {
                let dow = (w.anchor_day + step) % 7;
                out.extend_from_slice(&means[dow * cols..(dow + 1) * cols]);
            }
            Tensor::raw(w.target.shape().to_vec(), out)
        })
        .collect())
}
