//! Label algebra: per-light states, intent classes, view faces, and how they
//! transform under horizontal mirroring.
//!
//! Class indices are fixed:
//! intent `0 LEFT_TURN, 1 RIGHT_TURN, 2 FLASHERS, 3 OFF, 4 UNKNOWN`;
//! lights `0 ON, 1 OFF, 2 UNKNOWN`; view `0 BEHIND, 1 LEFT, 2 FRONT, 3 RIGHT`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! class_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident = $idx:literal => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "SCREAMING_SNAKE_CASE")]
        pub enum $name {
            $($variant = $idx),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = [$($idx),+].len();

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

class_enum!(
    /// Logical state of one signal light. `On` holds through the dark phase
    /// of a blink; `Unknown` means the light is occluded.
    LightState {
        On = 0 => "ON",
        Off = 1 => "OFF",
        Unknown = 2 => "UNKNOWN",
    }
);

class_enum!(
    IntentState {
        LeftTurn = 0 => "LEFT_TURN",
        RightTurn = 1 => "RIGHT_TURN",
        Flashers = 2 => "FLASHERS",
        Off = 3 => "OFF",
        Unknown = 4 => "UNKNOWN",
    }
);

class_enum!(
    /// Side of the vehicle facing the camera. `Left`/`Right` are the
    /// vehicle's own sides.
    ViewFace {
        Behind = 0 => "BEHIND",
        Left = 1 => "LEFT",
        Front = 2 => "FRONT",
        Right = 3 => "RIGHT",
    }
);

impl LightState {
    fn implied_intent(self, is_left: bool) -> IntentState {
        match (self, is_left) {
            (LightState::On, true) => IntentState::LeftTurn,
            (LightState::On, false) => IntentState::RightTurn,
            (LightState::Off, _) => IntentState::Off,
            (LightState::Unknown, _) => IntentState::Unknown,
        }
    }
}

impl IntentState {
    pub fn mirrored(self) -> Self {
        match self {
            IntentState::LeftTurn => IntentState::RightTurn,
            IntentState::RightTurn => IntentState::LeftTurn,
            other => other,
        }
    }

    /// The light states that display this intent, if it is a displayable signal.
    pub fn lights(self) -> Option<(LightState, LightState)> {
        use LightState::{Off, On};
        match self {
            IntentState::LeftTurn => Some((On, Off)),
            IntentState::RightTurn => Some((Off, On)),
            IntentState::Flashers => Some((On, On)),
            IntentState::Off => Some((Off, Off)),
            IntentState::Unknown => None,
        }
    }

    /// Ground-truth classes whose misclassification counts as a false positive.
    pub fn is_inactive(self) -> bool {
        matches!(self, IntentState::Off | IntentState::Unknown)
    }
}

impl ViewFace {
    pub fn mirrored(self) -> Self {
        match self {
            ViewFace::Left => ViewFace::Right,
            ViewFace::Right => ViewFace::Left,
            other => other,
        }
    }
}

/// Combines the two light states into the turn-signal intent.
///
/// With exactly one light unknown, `confident = true` resolves to the intent
/// implied by the visible light; otherwise the result is `Unknown`.
pub fn lights_to_intent(left: LightState, right: LightState, confident: bool) -> IntentState {
    use LightState::{Off, On, Unknown};
    match (left, right) {
        (On, Off) => IntentState::LeftTurn,
        (Off, On) => IntentState::RightTurn,
        (On, On) => IntentState::Flashers,
        (Off, Off) => IntentState::Off,
        (Unknown, Unknown) => IntentState::Unknown,
        (known, Unknown) if confident => known.implied_intent(true),
        (Unknown, known) if confident => known.implied_intent(false),
        _ => IntentState::Unknown,
    }
}

/// Per-frame supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameLabel {
    pub left: LightState,
    pub right: LightState,
    pub intent: IntentState,
    pub view: ViewFace,
}

impl FrameLabel {
    pub fn from_lights(left: LightState, right: LightState, view: ViewFace) -> Self {
        FrameLabel {
            left,
            right,
            intent: lights_to_intent(left, right, true),
            view,
        }
    }

    /// Labels of the horizontally mirrored frame.
    pub fn mirrored(self) -> Self {
        let (left, right, intent, view) = mirror_labels(self.left, self.right, self.intent, self.view);
        FrameLabel {
            left,
            right,
            intent,
            view,
        }
    }

    pub fn to_bytes(self) -> [u8; 4] {
        [
            self.left.index() as u8,
            self.right.index() as u8,
            self.intent.index() as u8,
            self.view.index() as u8,
        ]
    }

    pub fn from_bytes(b: [u8; 4]) -> Option<Self> {
        Some(FrameLabel {
            left: LightState::from_index(b[0] as usize)?,
            right: LightState::from_index(b[1] as usize)?,
            intent: IntentState::from_index(b[2] as usize)?,
            view: ViewFace::from_index(b[3] as usize)?,
        })
    }
}

/// Label consequence of flipping an image left to right.
pub fn mirror_labels(
    left: LightState,
    right: LightState,
    intent: IntentState,
    view: ViewFace,
) -> (LightState, LightState, IntentState, ViewFace) {
    (right, left, intent.mirrored(), view.mirrored())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_class<T: PartialOrd + Copy>(distribution: &[T]) -> Result<usize> {
    let (first, rest) = distribution.split_first().ok_or(Error::EmptyDistribution)?;
    let mut best = (0, *first);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use IntentState as I;
    use LightState as L;

    #[test]
    fn exhaustive_table() {
        let table = [
            (L::On, L::On, I::Flashers, I::Flashers),
            (L::On, L::Off, I::LeftTurn, I::LeftTurn),
            (L::On, L::Unknown, I::LeftTurn, I::Unknown),
            (L::Off, L::On, I::RightTurn, I::RightTurn),
            (L::Off, L::Off, I::Off, I::Off),
            (L::Off, L::Unknown, I::Off, I::Unknown),
            (L::Unknown, L::On, I::RightTurn, I::Unknown),
            (L::Unknown, L::Off, I::Off, I::Unknown),
            (L::Unknown, L::Unknown, I::Unknown, I::Unknown),
        ];
        for (l, r, confident, cautious) in table {
            assert_eq!(lights_to_intent(l, r, true), confident, "{l} {r}");
            assert_eq!(lights_to_intent(l, r, false), cautious, "{l} {r}");
        }
    }

    #[test]
    fn mirror_example_and_fixed_points() {
        assert_eq!(
            mirror_labels(L::On, L::Off, I::LeftTurn, ViewFace::Behind),
            (L::Off, L::On, I::RightTurn, ViewFace::Behind)
        );
        assert_eq!(I::Flashers.mirrored(), I::Flashers);
        assert_eq!(ViewFace::Front.mirrored(), ViewFace::Front);
    }

    #[test]
    fn mirror_commutes_with_intent() {
        for &l in L::ALL {
            for &r in L::ALL {
                for confident in [true, false] {
                    let direct = lights_to_intent(l, r, confident).mirrored();
                    let via = lights_to_intent(r, l, confident);
                    assert_eq!(direct, via);
                }
            }
        }
    }

    #[test]
    fn argmax_ties() {
        assert_eq!(argmax_class(&[0.2, 0.5, 0.3]).unwrap(), 1);
        assert_eq!(argmax_class(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(argmax_class(&[0.2f32; 5]).unwrap(), 0);
        assert!(argmax_class::<f32>(&[]).is_err());
    }

    #[test]
    fn label_bytes_round_trip() {
        let l = FrameLabel::from_lights(L::Unknown, L::On, ViewFace::Right);
        assert_eq!(FrameLabel::from_bytes(l.to_bytes()), Some(l));
        assert_eq!(FrameLabel::from_bytes([3, 0, 0, 0]), None);
    }
}
