use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Identity and grouping of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleKey {
    pub sample_id: u64,
    pub subject_id: u32,
    pub session_id: u32,
}

impl DatasetManifest {
    pub fn keys(&self) -> Vec<SampleKey> {
        self.samples
            .iter()
            .map(|s| SampleKey {
                sample_id: s.sample_id,
                subject_id: s.subject_id,
                session_id: s.session_id,
            })
            .collect()
    }
}

/// Train/test partition rule.
///
/// Text form: `fifty_fifty`, `loso:<subject>`, `cross_subject:<fraction>`,
/// `cross_session:<fraction>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Protocol {
    /// Odd subject ids train, even ones test.
    FiftyFifty,
    /// One held-out subject.
    Loso { subject: u32 },
    /// The first `ceil(f * S)` subject ids train.
    CrossSubject { train_fraction: f64 },
    /// Per subject, the first `ceil(f * sessions)` sessions train.
    CrossSession { train_fraction: f64 },
}

impl Protocol {
    pub fn subject_independent(&self) -> bool {
        !matches!(self, Protocol::CrossSession { .. })
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::FiftyFifty => write!(f, "fifty_fifty"),
            Protocol::Loso { subject } => write!(f, "loso:{subject}"),
            Protocol::CrossSubject { train_fraction } => write!(f, "cross_subject:{train_fraction}"),
            Protocol::CrossSession { train_fraction } => write!(f, "cross_session:{train_fraction}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("cannot parse protocol `{s}`"));
        let fraction = |a: Option<&str>| -> Result<f64> {
            let f: f64 = a.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if f > 0.0 && f <= 1.0 {
                Ok(f)
            } else {
                Err(Error::Config(format!("train fraction {f} must lie in (0, 1]")))
            }
        };
        match kind {
            "fifty_fifty" if arg.is_none() => Ok(Protocol::FiftyFifty),
            "loso" => Ok(Protocol::Loso {
                subject: arg.ok_or_else(bad)?.parse().map_err(|_| bad())?,
            }),
            "cross_subject" => Ok(Protocol::CrossSubject {
                train_fraction: fraction(arg)?,
            }),
            "cross_session" => Ok(Protocol::CrossSession {
                train_fraction: fraction(arg)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Protocol {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Protocol> for String {
    fn from(p: Protocol) -> String {
        p.to_string()
    }
}

/// A resolved partition of sample ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

fn first_fraction(n: usize, f: f64) -> usize {
    ((f * n as f64) - 1e-9).ceil().max(0.0) as usize
}

pub fn make_split(keys: &[SampleKey], protocol: Protocol) -> Result<SplitSpec> {
    let subjects: BTreeSet<u32> = keys.iter().map(|k| k.subject_id).collect();
    let train_subject: Box<dyn Fn(&SampleKey) -> bool> = match protocol {
        Protocol::FiftyFifty => Box::new(|k| k.subject_id % 2 == 1),
        Protocol::Loso { subject } => {
            if !subjects.contains(&subject) {
                return Err(Error::Config(format!("LOSO subject {subject} is not in the dataset")));
            }
            Box::new(move |k| k.subject_id != subject)
        }
        Protocol::CrossSubject { train_fraction } => {
            let n = first_fraction(subjects.len(), train_fraction);
            let train: BTreeSet<u32> = subjects.iter().copied().take(n).collect();
            Box::new(move |k| train.contains(&k.subject_id))
        }
        Protocol::CrossSession { train_fraction } => {
            let mut sessions: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
            for k in keys {
                sessions.entry(k.subject_id).or_default().insert(k.session_id);
            }
            let train: BTreeSet<(u32, u32)> = sessions
                .iter()
                .flat_map(|(&subj, ss)| {
                    let n = first_fraction(ss.len(), train_fraction);
                    ss.iter().take(n).map(move |&s| (subj, s))
                })
                .collect();
            Box::new(move |k| train.contains(&(k.subject_id, k.session_id)))
        }
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in keys {
        if train_subject(k) {
            train.push(k.sample_id);
        } else {
            test.push(k.sample_id);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "protocol {protocol} leaves the {} side empty",
            if train.is_empty() { "train" } else { "test" }
        )));
    }
    let split = SplitSpec { protocol, train, test };
    check_subject_independence(keys, &split)?;
    Ok(split)
}

fn check_subject_independence(keys: &[SampleKey], split: &SplitSpec) -> Result<()> {
    if !split.protocol.subject_independent() {
        return Ok(());
    }
    let subject_of: BTreeMap<u64, u32> = keys.iter().map(|k| (k.sample_id, k.subject_id)).collect();
    let train: BTreeSet<u32> = split.train.iter().map(|id| subject_of[id]).collect();
    if let Some(id) = split.test.iter().find(|id| train.contains(&subject_of[id])) {
        return Err(Error::Contract(format!(
            "subject {} appears on both sides of {}",
            subject_of[id], split.protocol
        )));
    }
    Ok(())
}

/// One LOSO protocol per subject, in ascending subject order.
pub fn loso_protocols(keys: &[SampleKey]) -> Vec<Protocol> {
    keys.iter()
        .map(|k| k.subject_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|subject| Protocol::Loso { subject })
        .collect()
}
