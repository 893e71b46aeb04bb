//! Simulated users: a gradient oracle, an acceptance-region user that stays
//! silent once satisfied, and a scripted user replaying a fixed schedule.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::UserError;
use crate::interpreter::corpus::TrainingExample;
use crate::interpreter::update::UpdateMarker;

fn sign_toward(theta: f64, target: f64) -> i8 {
    if theta > target {
        -1
    } else if theta < target {
        1
    } else {
        0
    }
}

/// User with quadratic objective `sum_i w_i (theta_i - theta*_i)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOracleUser {
    pub theta_star: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GradientOracleUser {
    pub fn new(theta_star: Vec<f64>, weights: Vec<f64>) -> Result<Self, UserError> {
        if weights.len() != theta_star.len() {
            return Err(UserError::Dimension { user: theta_star.len(), theta: weights.len() });
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(UserError::InvalidParameter("weights must be positive".into()));
        }
        Ok(Self { theta_star, weights })
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.theta_star).zip(&self.weights).map(|((t, s), w)| w * (t - s).powi(2)).sum()
    }

    /// Negative gradient sign of the objective.
    pub fn marker(&self, theta: &[f64]) -> Result<UpdateMarker, UserError> {
        if theta.len() != self.theta_star.len() {
            return Err(UserError::Dimension { user: self.theta_star.len(), theta: theta.len() });
        }
        let s = theta.iter().zip(&self.theta_star).map(|(t, s)| sign_toward(*t, *s)).collect();
        Ok(UpdateMarker::new(s).expect("signs are in range"))
    }
}

/// User satisfied on the closed box `theta*_i +- eps_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRegionUser {
    pub theta_star: Vec<f64>,
    pub eps: Vec<f64>,
}

impl AcceptanceRegionUser {
    pub fn new(theta_star: Vec<f64>, eps: Vec<f64>) -> Result<Self, UserError> {
        if eps.len() != theta_star.len() {
            return Err(UserError::Dimension { user: theta_star.len(), theta: eps.len() });
        }
        if eps.iter().any(|e| !(*e > 0.0)) {
            return Err(UserError::InvalidParameter("eps must be positive".into()));
        }
        Ok(Self { theta_star, eps })
    }

    pub fn accepts(&self, theta: &[f64]) -> bool {
        theta.iter().zip(&self.theta_star).zip(&self.eps).all(|((t, s), e)| (t - s).abs() <= *e)
    }

    /// `None` inside the region; otherwise a marker on every violated component.
    pub fn feedback(&self, theta: &[f64]) -> Result<Option<UpdateMarker>, UserError> {
        if theta.len() != self.theta_star.len() {
            return Err(UserError::Dimension { user: self.theta_star.len(), theta: theta.len() });
        }
        if self.accepts(theta) {
            return Ok(None);
        }
        let s = theta
            .iter()
            .zip(&self.theta_star)
            .zip(&self.eps)
            .map(|((t, s), e)| if (t - s).abs() > *e { sign_toward(*t, *s) } else { 0 })
            .collect();
        Ok(Some(UpdateMarker::new(s).expect("signs are in range")))
    }
}

/// Condition under which a scheduled prompt is issued.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedTrigger {
    /// At the start of the given trial (1-based).
    Trial(u32),
    /// At the given control step of any trial.
    Step(u64),
    /// First step at which the unrecognized obstacle is within this distance.
    HiddenObstacleWithin(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledPrompt {
    pub trigger: ScriptedTrigger,
    pub text: String,
}

/// What a scripted user can see when deciding whether to speak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub trial: u32,
    pub step: u64,
    /// Distance from the vehicle to the unrecognized obstacle, if any.
    pub hidden_distance: Option<f64>,
}

/// Replays a fixed schedule; every entry fires at most once per trial.
/// Only the schedule is serialized; a deserialized user starts unfired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct ScriptedUser {
    schedule: Vec<ScheduledPrompt>,
    fired: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    schedule: Vec<ScheduledPrompt>,
}

impl From<ScheduleRepr> for ScriptedUser {
    fn from(r: ScheduleRepr) -> Self {
        Self::new(r.schedule)
    }
}

impl From<ScriptedUser> for ScheduleRepr {
    fn from(u: ScriptedUser) -> Self {
        Self { schedule: u.schedule }
    }
}

impl ScriptedUser {
    pub fn new(schedule: Vec<ScheduledPrompt>) -> Self {
        let fired = vec![false; schedule.len()];
        Self { schedule, fired }
    }

    pub fn entries(&self) -> &[ScheduledPrompt] {
        &self.schedule
    }

    /// Re-arm every entry, e.g. at the start of a new trial.
    pub fn rearm(&mut self) {
        self.fired = vec![false; self.schedule.len()];
    }

    /// First unfired entry whose trigger matches `obs`; it is marked fired.
    pub fn next(&mut self, obs: &Observation) -> Option<String> {
        if self.fired.len() != self.schedule.len() {
            self.fired = vec![false; self.schedule.len()];
        }
        let hit = self.schedule.iter().enumerate().find(|(i, p)| {
            !self.fired[*i]
                && match p.trigger {
                    ScriptedTrigger::Trial(t) => obs.trial == t && obs.step == 0,
                    ScriptedTrigger::Step(k) => obs.step == k,
                    ScriptedTrigger::HiddenObstacleWithin(d) => obs.hidden_distance.is_some_and(|h| h <= d),
                }
        });
        let (i, p) = hit?;
        self.fired[i] = true;
        Some(p.text.clone())
    }
}

/// Sentences grouped by the marker they express.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TemplateBank {
    classes: Vec<(UpdateMarker, Vec<String>)>,
}

impl TemplateBank {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a TrainingExample>) -> Self {
        let mut bank = Self::default();
        for ex in examples {
            match bank.classes.iter_mut().find(|(m, _)| *m == ex.marker) {
                Some((_, v)) => v.push(ex.text.clone()),
                None => bank.classes.push((ex.marker.clone(), vec![ex.text.clone()])),
            }
        }
        bank
    }

    pub fn templates(&self, marker: &UpdateMarker) -> Option<&[String]> {
        self.classes.iter().find(|(m, _)| m == marker).map(|(_, v)| v.as_slice())
    }

    pub fn classes(&self) -> impl Iterator<Item = (&UpdateMarker, &[String])> {
        self.classes.iter().map(|(m, v)| (m, v.as_slice()))
    }
}

/// Uniformly sampled sentence expressing `marker`.
pub fn render_prompt<R: Rng + ?Sized>(
    marker: &UpdateMarker,
    bank: &TemplateBank,
    rng: &mut R,
) -> Result<String, UserError> {
    if marker.active().count() != 1 {
        return Err(UserError::NoTemplateClass(marker.as_slice().to_vec()));
    }
    bank.templates(marker)
        .and_then(|t| t.choose(rng))
        .cloned()
        .ok_or_else(|| UserError::NoTemplateClass(marker.as_slice().to_vec()))
}

/// Single-component markers, one per nonzero entry of `marker`, in index order.
pub fn split_marker(marker: &UpdateMarker) -> Vec<UpdateMarker> {
    marker.active().map(|(i, s)| UpdateMarker::unit(marker.len(), i, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::corpus::BuiltinCorpus;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(v: &[i8]) -> UpdateMarker {
        UpdateMarker::new(v.to_vec()).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let u = GradientOracleUser::new(vec![0.3, 0.3], vec![1.0, 2.0]).unwrap();
        assert_eq!(u.marker(&[0.3, 0.3]).unwrap(), m(&[0, 0]));
        assert_eq!(u.marker(&[0.5, 0.2]).unwrap(), m(&[-1, 1]));
        assert_eq!(u.objective(&[0.3, 0.3]), 0.0);
        assert!(GradientOracleUser::new(vec![0.0], vec![0.0]).is_err());
        assert!(u.marker(&[0.1]).is_err());
    }

    #[test]
    fn acceptance_examples() {
        let u = AcceptanceRegionUser::new(vec![1.0, 2.0], vec![0.1, 0.2]).unwrap();
        assert_eq!(u.feedback(&[1.05, 2.1]).unwrap(), None);
        assert_eq!(u.feedback(&[1.2, 2.1]).unwrap(), Some(m(&[-1, 0])));
        // closed region: boundary (exactly representable) is silent
        let u = AcceptanceRegionUser::new(vec![1.0], vec![0.5]).unwrap();
        assert_eq!(u.feedback(&[1.5]).unwrap(), None);
        assert_eq!(u.feedback(&[0.5]).unwrap(), None);
        assert!(AcceptanceRegionUser::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn scripted_trials() {
        let mut u = ScriptedUser::new(vec![
            ScheduledPrompt { trigger: ScriptedTrigger::Trial(2), text: "Separate from the vase.".into() },
            ScheduledPrompt {
                trigger: ScriptedTrigger::Trial(3),
                text: "You don't have to be so careful about the toy.".into(),
            },
        ]);
        let obs = |trial, step| Observation { trial, step, hidden_distance: None };
        assert_eq!(u.next(&obs(1, 0)), None);
        assert_eq!(u.next(&obs(2, 1)), None);
        assert_eq!(u.next(&obs(2, 0)).as_deref(), Some("Separate from the vase."));
        assert_eq!(u.next(&obs(2, 0)), None);
        assert!(u.next(&obs(3, 0)).is_some());
    }

    #[test]
    fn scripted_proximity_fires_once() {
        let mut u = ScriptedUser::new(vec![ScheduledPrompt {
            trigger: ScriptedTrigger::HiddenObstacleWithin(14.0),
            text: "an obstacle is present in the right frontal area.".into(),
        }]);
        let obs = |step, d| Observation { trial: 1, step, hidden_distance: Some(d) };
        assert_eq!(u.next(&obs(0, 30.0)), None);
        assert!(u.next(&obs(5, 13.9)).is_some());
        assert_eq!(u.next(&obs(6, 10.0)), None);
        u.rearm();
        assert!(u.next(&obs(0, 10.0)).is_some());
    }

    #[test]
    fn scripted_step_trigger() {
        let mut u = ScriptedUser::new(vec![ScheduledPrompt { trigger: ScriptedTrigger::Step(7), text: "x".into() }]);
        assert_eq!(u.next(&Observation { trial: 1, step: 6, hidden_distance: None }), None);
        assert!(u.next(&Observation { trial: 1, step: 7, hidden_distance: None }).is_some());
    }

    #[test]
    fn scripted_user_serde_roundtrip() {
        let u = ScriptedUser::new(vec![ScheduledPrompt {
            trigger: ScriptedTrigger::HiddenObstacleWithin(22.0),
            text: "obstacle in front!".into(),
        }]);
        let json = serde_json::to_string(&u).unwrap();
        assert!(json.contains("hidden_obstacle_within"));
        let back: ScriptedUser = serde_json::from_str(&json).unwrap();
        assert_eq!(back.entries(), u.entries());
    }

    #[test]
    fn render_prompt_classes() {
        let nav = BuiltinCorpus::Navigation.training();
        let bank = TemplateBank::from_examples(&nav);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = render_prompt(&m(&[-1, 0]), &bank, &mut rng).unwrap();
        assert!(s.contains("vase") && (s.contains("separate") || s.contains("close")));

        let drv = BuiltinCorpus::Driving.training();
        let bank = TemplateBank::from_examples(&drv);
        let s = render_prompt(&m(&[0, 0, 1]), &bank, &mut rng).unwrap();
        assert!(s.to_lowercase().contains("right"));

        let a = render_prompt(&m(&[0, 1, 0]), &bank, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = render_prompt(&m(&[0, 1, 0]), &bank, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        assert!(render_prompt(&m(&[1, 1, 0]), &bank, &mut rng).is_err());
        assert!(render_prompt(&m(&[0, 0, -1]), &bank, &mut rng).is_err());
    }

    #[test]
    fn split_marker_components() {
        assert_eq!(split_marker(&m(&[-1, 0, 1])), vec![m(&[-1, 0, 0]), m(&[0, 0, 1])]);
        assert!(split_marker(&m(&[0, 0])).is_empty());
    }

    proptest! {
        #[test]
        fn feedback_points_toward_target(
            theta in prop::collection::vec(-5.0f64..5.0, 3),
            star in prop::collection::vec(-5.0f64..5.0, 3),
            eps in prop::collection::vec(1e-3f64..1.0, 3),
        ) {
            let g = GradientOracleUser::new(star.clone(), vec![1.0; 3]).unwrap();
            let s = g.marker(&theta).unwrap();
            prop_assert_eq!(s.is_zero(), theta == star);
            for (i, si) in s.active() {
                prop_assert!((star[i] - theta[i]) * f64::from(si) >= 0.0);
            }
            let a = AcceptanceRegionUser::new(star.clone(), eps).unwrap();
            match a.feedback(&theta).unwrap() {
                None => prop_assert!(a.accepts(&theta)),
                Some(s) => {
                    prop_assert!(!a.accepts(&theta));
                    prop_assert!(!s.is_zero());
                    for (i, si) in s.active() {
                        prop_assert!((star[i] - theta[i]) * f64::from(si) > 0.0);
                    }
                }
            }
        }
    }
}
