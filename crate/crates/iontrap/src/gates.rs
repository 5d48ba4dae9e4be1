//! Named rotations on the carrier and blue sideband, and their exact operators.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::frames::{coupling_operator, Transition};
use crate::qlinalg::{expm_hermitian, Operator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    XPlus,
    YPlus,
}

impl Axis {
    pub fn transition(self) -> Transition {
        match self {
            Axis::X | Axis::Y => Transition::Carrier,
            Axis::XPlus | Axis::YPlus => Transition::BlueSideband,
        }
    }

    /// Laser phase that realizes a positive rotation about this axis.
    pub fn laser_phase(self) -> f64 {
        match self {
            Axis::X | Axis::XPlus => 0.0,
            Axis::Y | Axis::YPlus => 1.5 * PI,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Axis::X => "Rx",
            Axis::Y => "Ry",
            Axis::XPlus => "Rx+",
            Axis::YPlus => "Ry+",
        }
    }
}

/// A rotation by `theta` about `axis`. Sideband angles refer to the {S0, D1} manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub axis: Axis,
    pub theta: f64,
}

impl Rotation {
    pub const fn new(axis: Axis, theta: f64) -> Self {
        Self { axis, theta }
    }

    /// exp(-i theta G) with G the unit-rate coupling of the axis.
    pub fn operator(&self) -> Operator {
        let g = coupling_operator(self.axis.transition(), self.axis.laser_phase());
        expm_hermitian(&g, self.theta).expect("coupling operators are Hermitian")
    }

    /// Positive angle and laser phase realizing this rotation.
    pub fn pulse_angle_phase(&self) -> (f64, f64) {
        let phi = self.axis.laser_phase();
        if self.theta < 0.0 {
            (-self.theta, normalize_phase(phi + PI))
        } else {
            (self.theta, phi)
        }
    }
}

pub fn normalize_phase(phi: f64) -> f64 {
    let r = phi.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

fn format_angle(theta: f64) -> String {
    let ratio = theta / PI;
    for den in [1.0, 2.0, 4.0] {
        let num = ratio * den;
        if (num - num.round()).abs() < 1e-12 && num.round() != 0.0 {
            let n = num.round() as i64;
            let head = match n {
                1 => "pi".to_string(),
                -1 => "-pi".to_string(),
                _ => format!("{n}pi"),
            };
            return if den == 1.0 { head } else { format!("{head}/{den}") };
        }
    }
    if theta == 0.0 {
        "0".to_string()
    } else {
        format!("{theta}")
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.axis.symbol(), format_angle(self.theta))
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("cannot parse rotation `{0}`")]
pub struct ParseRotationError(pub String);

fn parse_angle(s: &str) -> Option<f64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let mut value = 1.0;
    let mut first = true;
    for (k, part) in body.split('/').enumerate() {
        let part = part.trim();
        let v = match part {
            "pi" => PI,
            "sqrt2" => 2f64.sqrt(),
            _ => match part.strip_suffix("pi") {
                Some(n) if !n.is_empty() => n.parse::<f64>().ok()? * PI,
                _ => part.parse::<f64>().ok()?,
            },
        };
        if k == 0 {
            value = v;
        } else {
            value /= v;
        }
        first = false;
    }
    if first {
        return None;
    }
    Some(if neg { -value } else { value })
}

impl FromStr for Rotation {
    type Err = ParseRotationError;

    /// Accepts forms like `Ry(-pi)`, `Rx+(pi/2)` or `Ry+(-pi/sqrt2)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseRotationError(s.to_string());
        let s = s.trim();
        let open = s.find('(').ok_or_else(err)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(err)?;
        let axis = match &s[..open] {
            "Rx" => Axis::X,
            "Ry" => Axis::Y,
            "Rx+" => Axis::XPlus,
            "Ry+" => Axis::YPlus,
            _ => return Err(err()),
        };
        let theta = parse_angle(inner).ok_or_else(err)?;
        Ok(Rotation::new(axis, theta))
    }
}

/// Parses a whitespace-separated operation string in written (left-to-right) order.
/// `I` denotes the empty string.
pub fn parse_ops(s: &str) -> Result<Vec<Rotation>, ParseRotationError> {
    s.split_whitespace().filter(|t| *t != "I").map(str::parse).collect()
}

/// Product of an operation string as written; the rightmost factor acts first.
pub fn ops_unitary(ops: &[Rotation]) -> Operator {
    ops.iter().fold(Operator::identity(), |acc, r| acc * r.operator())
}

pub fn format_ops(ops: &[Rotation]) -> String {
    if ops.is_empty() {
        return "I".to_string();
    }
    ops.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}
