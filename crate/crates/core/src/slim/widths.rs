use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing layer widths `w(0) < … < w(K-1)` shared by every
/// slimmable layer of a model. Level `k` (zero-based) runs at width `w(k)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct WidthSet(Vec<usize>);

impl WidthSet {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::config("width set must contain at least one width"));
        }
        if widths[0] == 0 {
            return Err(Error::config("widths must be positive"));
        }
        if let Some(pair) = widths.windows(2).find(|p| p[0] >= p[1]) {
            return Err(Error::config(format!(
                "widths must be strictly increasing, found {} followed by {}",
                pair[0], pair[1]
            )));
        }
        Ok(WidthSet(widths))
    }

    /// Number of levels `K`.
    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.0[level]
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty by construction")
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.levels() {
            return Err(Error::config(format!(
                "width level {} out of range 1..={}",
                level + 1,
                self.levels()
            )));
        }
        Ok(())
    }

    /// Channel range `[w(level-1), w(level))` of the latent group that is new
    /// at `level` (the first group starts at channel 0).
    pub fn group(&self, level: usize) -> std::ops::Range<usize> {
        let start = if level == 0 { 0 } else { self.0[level - 1] };
        start..self.0[level]
    }
}

impl TryFrom<Vec<usize>> for WidthSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        WidthSet::new(v)
    }
}

impl From<WidthSet> for Vec<usize> {
    fn from(w: WidthSet) -> Self {
        w.0
    }
}

impl std::str::FromStr for WidthSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("invalid width {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        WidthSet::new(widths)
    }
}

impl std::fmt::Display for WidthSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unordered_and_empty() {
        assert!(WidthSet::new(vec![]).is_err());
        assert!(WidthSet::new(vec![4, 4]).is_err());
        assert!(WidthSet::new(vec![8, 4]).is_err());
        assert!(WidthSet::new(vec![0, 4]).is_err());
        assert!("4,8,16".parse::<WidthSet>().is_ok());
    }

    #[test]
    fn groups_partition_the_widest_level() {
        let w: WidthSet = "48,72,96,144,192".parse().unwrap();
        let groups: Vec<_> = (0..5).map(|k| w.group(k)).collect();
        assert_eq!(groups[0], 0..48);
        assert_eq!(groups[1], 48..72);
        assert_eq!(groups[4], 144..192);
    }
}
