use crate::error::{FtcError, Result};

/// Reference pose, speed and turn rate at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub psi_dot: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceSignal {
    /// Counter-clockwise circle at constant speed, at angle `phase` when `t = 0`.
    Circle {
        center: (f64, f64),
        radius: f64,
        speed: f64,
        phase: f64,
    },
    /// Straight line from `origin` along `heading`.
    Line {
        origin: (f64, f64),
        heading: f64,
        speed: f64,
    },
}

impl ReferenceSignal {
    pub fn sample(&self, t: f64) -> ReferencePoint {
        match *self {
            ReferenceSignal::Circle {
                center,
                radius,
                speed,
                phase,
            } => {
                let rate = speed / radius;
                let theta = phase + rate * t;
                ReferencePoint {
                    x: center.0 + radius * theta.cos(),
                    y: center.1 + radius * theta.sin(),
                    psi: theta + std::f64::consts::FRAC_PI_2,
                    v: speed,
                    psi_dot: rate,
                }
            }
            ReferenceSignal::Line { origin, heading, speed } => ReferencePoint {
                x: origin.0 + speed * t * heading.cos(),
                y: origin.1 + speed * t * heading.sin(),
                psi: heading,
                v: speed,
                psi_dot: 0.0,
            },
        }
    }
}

/// Constant-speed circle starting on the positive x axis of `center`.
pub fn build_reference_circle(radius: f64, speed: f64, center: (f64, f64)) -> Result<ReferenceSignal> {
    if !(radius > 0.0 && radius.is_finite()) || !(speed > 0.0 && speed.is_finite()) {
        return Err(FtcError::InvalidArgument(format!(
            "circle needs positive radius and speed, got {radius} and {speed}"
        )));
    }
    Ok(ReferenceSignal::Circle {
        center,
        radius,
        speed,
        phase: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn circle_examples() {
        let r = build_reference_circle(50.0, 10.0, (0.0, 0.0)).unwrap();
        let p0 = r.sample(0.0);
        assert_eq!(p0.psi_dot, 0.2);
        assert_eq!((p0.x, p0.y), (50.0, 0.0));
        assert_abs_diff_eq!(p0.psi, std::f64::consts::FRAC_PI_2);
        let period = 2.0 * std::f64::consts::PI * 50.0 / 10.0;
        let p1 = r.sample(period);
        assert_abs_diff_eq!(p1.x, p0.x, epsilon = 1e-9);
        assert_abs_diff_eq!(p1.y, p0.y, epsilon = 1e-9);
        for k in 0..200 {
            let p = r.sample(k as f64 * 0.37);
            assert_abs_diff_eq!(p.x.hypot(p.y), 50.0, epsilon = 1e-12);
        }
        assert!(build_reference_circle(0.0, 10.0, (0.0, 0.0)).is_err());
        assert!(build_reference_circle(5.0, -1.0, (0.0, 0.0)).is_err());
    }

    #[test]
    fn circle_heading_is_tangent() {
        let r = build_reference_circle(20.0, 4.0, (3.0, -1.0)).unwrap();
        let h = 1e-6;
        for k in 0..20 {
            let t = k as f64;
            let (a, b) = (r.sample(t - h), r.sample(t + h));
            let dir = (b.y - a.y).atan2(b.x - a.x);
            let psi = r.sample(t).psi;
            assert_abs_diff_eq!((dir - psi).sin(), 0.0, epsilon = 1e-6);
            assert!((dir - psi).cos() > 0.0);
        }
    }

    #[test]
    fn line_reference() {
        let r = ReferenceSignal::Line {
            origin: (1.0, 2.0),
            heading: 0.0,
            speed: 10.0,
        };
        let p = r.sample(1.5);
        assert_eq!((p.x, p.y, p.v, p.psi_dot), (16.0, 2.0, 10.0, 0.0));
    }
}
