use std::fmt::Write as _;
use std::path::Path;

use crate::anatomy::Class;
use crate::error::{Error, Result};
use crate::graphcore::BranchId;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub branch_id: BranchId,
    pub label: Option<Class>,
    pub values: Vec<f32>,
}

/// CSV with header `branch_id,label,f0000,...`; rows in the given order,
/// an empty label field for unlabeled branches.
pub fn export_features_csv(path: &Path, ids: &[BranchId], labels: &[Option<Class>], features: &Tensor<f32>) -> Result<()> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::shape(format!("features must be 2-D, got {s:?}"))),
    };
    if ids.len() != n || labels.len() != n {
        return Err(Error::shape(format!("{n} feature rows, {} ids, {} labels", ids.len(), labels.len())));
    }
    let mut s = String::from("branch_id,label");
    for j in 0..d {
        write!(s, ",f{j:04}").unwrap();
    }
    s.push('\n');
    for i in 0..n {
        write!(s, "{},{}", ids[i], labels[i].map_or("", Class::name)).unwrap();
        for v in features.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("feature csv", "empty file"))?;
    let width = header.split(',').count();
    if !header.starts_with("branch_id,label") {
        return Err(Error::format("feature csv", "unexpected header"));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != width {
                return Err(Error::format("feature csv", format!("row has {} columns, header {width}", cols.len())));
            }
            let bad = |m: String| Error::format("feature csv", m);
            let branch_id = cols[0].parse().map_err(|_| bad(format!("bad id {:?}", cols[0])))?;
            let label = match cols[1] {
                "" => None,
                s => Some(Class::from_name(s).ok_or_else(|| bad(format!("bad label {s:?}")))?),
            };
            let values = cols[2..].iter().map(|v| v.parse::<f32>().map_err(|_| bad(format!("bad value {v:?}")))).collect::<Result<_>>()?;
            Ok(FeatureRow { branch_id, label, values })
        })
        .collect()
}
