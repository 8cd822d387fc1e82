use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::sphere::CoefficientPyramid;
use crate::{Error, Result};

/// Contiguous time-step range `[start, end)` of a named source.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleRange {
    pub source: String,
    pub start: usize,
    pub end: usize,
}

impl SampleRange {
    pub fn new(source: impl Into<String>, start: usize, end: usize) -> Self {
        SampleRange {
            source: source.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &SampleRange) -> bool {
        self.source == other.source && self.start < other.end && other.start < self.end
    }
}

/// Train / validation / test manifests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<SampleRange>,
    pub validation: Vec<SampleRange>,
    pub test: Vec<SampleRange>,
}

impl Splits {
    /// Rejects empty ranges, empty training sets and overlapping manifests.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidConfig("no training data".into()));
        }
        let groups = [("train", &self.train), ("validation", &self.validation), ("test", &self.test)];
        for (name, g) in groups {
            if let Some(r) = g.iter().find(|r| r.is_empty()) {
                return Err(Error::InvalidConfig(format!("empty {name} range {r:?}")));
            }
        }
        for (i, (na, a)) in groups.iter().enumerate() {
            for (nb, b) in &groups[i + 1..] {
                for x in a.iter() {
                    if let Some(y) = b.iter().find(|y| x.overlaps(y)) {
                        return Err(Error::InvalidConfig(format!("{na} range {x:?} overlaps {nb} range {y:?}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Purpose of a data read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Validation,
    Test,
    /// Observation statistics used as the training target.
    Target,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub phase: Phase,
    pub range: SampleRange,
}

/// Named coefficient pyramids with a log of every range handed out.
#[derive(Debug, Default)]
pub struct Dataset {
    sources: BTreeMap<String, CoefficientPyramid>,
    log: Mutex<Vec<AccessRecord>>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, pyramid: CoefficientPyramid) {
        self.sources.insert(name.into(), pyramid);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sources.keys().map(String::as_str)
    }

    /// Whole-record range of a source.
    pub fn full_range(&self, name: &str) -> Result<SampleRange> {
        let p = self.get(name)?;
        Ok(SampleRange::new(name, 0, p.n_times()))
    }

    fn get(&self, name: &str) -> Result<&CoefficientPyramid> {
        self.sources
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown data source {name:?}")))
    }

    /// Borrowed view of `range`, recorded in the access log.
    pub fn view(&self, range: &SampleRange, phase: Phase) -> Result<DataView<'_>> {
        let pyramid = self.get(&range.source)?;
        if range.is_empty() || range.end > pyramid.n_times() {
            return Err(Error::InvalidIndex(format!(
                "range {range:?} outside a record of {} steps",
                pyramid.n_times()
            )));
        }
        self.log.lock().expect("access log poisoned").push(AccessRecord {
            phase,
            range: range.clone(),
        });
        Ok(DataView {
            pyramid,
            start: range.start,
            end: range.end,
        })
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("access log poisoned").clear();
    }
}

/// Checks that nothing read for training or targets touches a validation
/// or test range.
pub fn check_split_hygiene(log: &[AccessRecord], splits: &Splits) -> Result<()> {
    for rec in log.iter().filter(|r| matches!(r.phase, Phase::Train | Phase::Target)) {
        if let Some(h) = splits.validation.iter().chain(&splits.test).find(|h| h.overlaps(&rec.range)) {
            return Err(Error::InvalidConfig(format!(
                "{:?} read of {:?} overlaps held-out range {h:?}",
                rec.phase, rec.range
            )));
        }
    }
    Ok(())
}

/// Time window of a pyramid.
#[derive(Debug, Clone, Copy)]
pub struct DataView<'a> {
    pyramid: &'a CoefficientPyramid,
    start: usize,
    end: usize,
}

impl<'a> DataView<'a> {
    /// View of a whole pyramid that bypasses the access log.
    pub fn whole(pyramid: &'a CoefficientPyramid) -> Self {
        DataView {
            pyramid,
            start: 0,
            end: pyramid.n_times(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self) -> crate::sphere::TimeAxis {
        self.pyramid.time().slice(self.start, self.len())
    }

    pub fn has_level(&self, level: usize) -> bool {
        self.pyramid.level(level).is_some()
    }

    /// Owned copy of the window restricted to `levels` (levels absent from
    /// the source are skipped).
    pub fn extract(&self, levels: core::ops::RangeInclusive<usize>) -> CoefficientPyramid {
        let mut p = CoefficientPyramid::new(self.time());
        for l in self.pyramid.levels().iter().filter(|l| levels.contains(&l.level())) {
            p.insert_level(l.time_slice(self.start, self.len())).expect("same time axis");
        }
        p
    }

    pub fn series(&self, level: usize, center: usize) -> Result<&'a [f64]> {
        self.pyramid
            .series(level, center)
            .map(|s| &s[self.start..self.end])
            .ok_or(Error::MissingLevel(level))
    }
}
