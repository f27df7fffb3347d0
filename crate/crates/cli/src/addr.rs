// SPDX-License-Identifier: MIT OR Apache-2.0

//! `layer:index` addresses for heads and experts.

use std::fmt;
use std::str::FromStr;

use moelab::knowledge::HeadAddr;
use moelab::model::ExpertRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadArg(pub HeadAddr);

/// `l:j` for a routed expert, `l:s` for the shared one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertArg {
    pub layer: usize,
    pub expert: ExpertRef,
}

fn split(s: &str) -> Result<(usize, &str), String> {
    let (l, i) = s
        .split_once(':')
        .ok_or_else(|| format!("expected layer:index, got {s:?}"))?;
    let layer = l.trim().parse().map_err(|_| format!("bad layer in {s:?}"))?;
    Ok((layer, i.trim()))
}

impl FromStr for HeadArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (layer, i) = split(s)?;
        let head = i.parse().map_err(|_| format!("bad head index in {s:?}"))?;
        Ok(HeadArg(HeadAddr { layer, head }))
    }
}

impl FromStr for ExpertArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (layer, i) = split(s)?;
        let expert = if i == "s" {
            ExpertRef::Shared
        } else {
            ExpertRef::Routed(i.parse().map_err(|_| format!("bad expert index in {s:?}"))?)
        };
        Ok(ExpertArg { layer, expert })
    }
}

impl fmt::Display for HeadArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ExpertArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.expert)
    }
}
