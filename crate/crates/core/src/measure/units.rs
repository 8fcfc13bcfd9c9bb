//! Unit-bearing literals and their canonical forms.
//!
//! Time is held in seconds, frequency in hertz, ratios as plain fractions
//! (`1%` is 0.01) and rates in bytes per second.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Time,
    Frequency,
    Ratio,
    Rate,
    Dimensionless,
}

impl Dimension {
    /// Whether values of the two dimensions can be compared or combined.
    pub fn compatible(self, other: Dimension) -> bool {
        use Dimension::*;
        self == other || matches!((self, other), (Ratio, Dimensionless) | (Dimensionless, Ratio))
    }

    /// The unit whose scale is 1.
    pub fn canonical_unit(self) -> Unit {
        match self {
            Dimension::Time => Unit::S,
            Dimension::Frequency => Unit::Hz,
            Dimension::Rate => Unit::Bps,
            Dimension::Ratio | Dimension::Dimensionless => Unit::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "")]
    None,
    #[serde(rename = "s")]
    S,
    #[serde(rename = "ms")]
    Ms,
    #[serde(rename = "us")]
    Us,
    #[serde(rename = "ns")]
    Ns,
    #[serde(rename = "hz")]
    Hz,
    #[serde(rename = "khz")]
    KHz,
    #[serde(rename = "%")]
    Percent,
    #[serde(rename = "Bps")]
    Bps,
    #[serde(rename = "kBps")]
    KBps,
    #[serde(rename = "MBps")]
    MBps,
    #[serde(rename = "GBps")]
    GBps,
    #[serde(rename = "bps")]
    Bitps,
    #[serde(rename = "kbps")]
    KBitps,
    #[serde(rename = "Mbps")]
    MBitps,
    #[serde(rename = "Gbps")]
    GBitps,
}

impl Unit {
    pub fn dimension(self) -> Dimension {
        use Unit::*;
        match self {
            None => Dimension::Dimensionless,
            S | Ms | Us | Ns => Dimension::Time,
            Hz | KHz => Dimension::Frequency,
            Percent => Dimension::Ratio,
            Bps | KBps | MBps | GBps | Bitps | KBitps | MBitps | GBitps => Dimension::Rate,
        }
    }

    /// Multiplier from this unit to the canonical unit of its dimension.
    pub fn scale(self) -> f64 {
        use Unit::*;
        match self {
            None | S | Hz | Bps => 1.0,
            Ms => 1e-3,
            Us => 1e-6,
            Ns => 1e-9,
            KHz => 1e3,
            Percent => 1e-2,
            KBps => 1e3,
            MBps => 1e6,
            GBps => 1e9,
            Bitps => 0.125,
            KBitps => 125.0,
            MBitps => 125e3,
            GBitps => 125e6,
        }
    }

    /// Converts a value in this unit to the canonical unit. Sub-units divide
    /// by an exact power so that `9ms` becomes exactly `0.009`.
    pub fn to_canonical(self, v: f64) -> f64 {
        use Unit::*;
        match self {
            Ms => v / 1e3,
            Us => v / 1e6,
            Ns => v / 1e9,
            Percent => v / 1e2,
            Bitps => v / 8.0,
            u => v * u.scale(),
        }
    }

    pub fn symbol(self) -> &'static str {
        use Unit::*;
        match self {
            None => "",
            S => "s",
            Ms => "ms",
            Us => "us",
            Ns => "ns",
            Hz => "hz",
            KHz => "khz",
            Percent => "%",
            Bps => "Bps",
            KBps => "kBps",
            MBps => "MBps",
            GBps => "GBps",
            Bitps => "bps",
            KBitps => "kbps",
            MBitps => "Mbps",
            GBitps => "Gbps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown unit {0:?}")]
pub struct UnknownUnit(pub String);

impl FromStr for Unit {
    type Err = UnknownUnit;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Unit::*;
        Ok(match s {
            "" => None,
            "s" => S,
            "ms" => Ms,
            "us" => Us,
            "ns" => Ns,
            "hz" | "Hz" => Hz,
            "khz" | "kHz" => KHz,
            "%" => Percent,
            "Bps" => Bps,
            "kBps" => KBps,
            "MBps" => MBps,
            "GBps" => GBps,
            "bps" => Bitps,
            "kbps" => KBitps,
            "Mbps" => MBitps,
            "Gbps" => GBitps,
            other => return Err(UnknownUnit(other.to_owned())),
        })
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// A number with a unit, as written in the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: Unit,
}

impl Quantity {
    pub fn new(value: f64, unit: Unit) -> Self {
        Self { value, unit }
    }

    pub fn canonical(self) -> f64 {
        self.unit.to_canonical(self.value)
    }

    pub fn dimension(self) -> Dimension {
        self.unit.dimension()
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.value, self.unit)
    }
}

/// Dimension produced by a measurement function, when the function is known.
pub fn function_dimension(function: &str) -> Option<Dimension> {
    match function.to_ascii_lowercase().as_str() {
        "delay" | "latency" | "rtt" | "owd" | "jitter" => Some(Dimension::Time),
        "loss" | "loss_rate" | "utilization" | "util" | "risk" | "overload_risk" => Some(Dimension::Ratio),
        "rate" | "throughput" | "bandwidth" => Some(Dimension::Rate),
        _ => None,
    }
}
