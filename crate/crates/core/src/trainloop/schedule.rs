//! Which components each objective may update.

use std::fmt;

use crate::datapipe::Stage;
use crate::losses::LossName;
use crate::nets::{Component, ComponentSet};

use Component::*;

/// The individual objectives of the three stages. Several map to the same
/// logged [`LossName`] (e.g. the fog and clean supervised EPE both log as
/// `epe_sup`) but carry different trainable sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Objective {
    /// Synthetic fog pair flow against ground truth.
    EpeSupFog,
    /// Synthetic clean pair flow against ground truth.
    EpeSupClean,
    /// Rendered clean from synthetic fog against the clean ground truth.
    L1FogToClean,
    /// Rendered fog from synthetic clean against the fog ground truth.
    L1CleanToFog,
    /// Rendered fog judged by the fog discriminator.
    GanGenFog,
    /// Rendered clean judged by the clean discriminator.
    GanGenClean,
    DiscFog,
    DiscClean,
    /// Cycle reconstruction of the stage's input frames.
    Consistency,
    /// Flow of the rendered fog pair against the clean-pair flow (the target).
    EpeCross,
    /// Hazeline collinearity between the clean-side and fog-side images.
    Hazeline,
    /// Flow of the real fog pair against the flow of its rendered clean pair.
    FlowConsistency,
}

impl Objective {
    pub fn loss(self) -> LossName {
        match self {
            Objective::EpeSupFog | Objective::EpeSupClean => LossName::EpeSup,
            Objective::L1FogToClean | Objective::L1CleanToFog => LossName::L1Sup,
            Objective::GanGenFog | Objective::GanGenClean => LossName::GanG,
            Objective::DiscFog | Objective::DiscClean => LossName::GanD,
            Objective::Consistency => LossName::Con,
            Objective::EpeCross => LossName::EpeCross,
            Objective::Hazeline => LossName::Hazeline,
            Objective::FlowConsistency => LossName::FlowCon,
        }
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, Objective::DiscFog | Objective::DiscClean)
    }

    /// Components updated by this objective in `stage`.
    pub fn trainable(self, stage: Stage) -> ComponentSet {
        match self {
            Objective::EpeSupFog => ComponentSet::of(&[FogEncoder, FlowDecoder]),
            Objective::EpeSupClean => ComponentSet::of(&[CleanEncoder, FlowDecoder]),
            Objective::L1FogToClean | Objective::GanGenClean => ComponentSet::of(&[FogEncoder, CleanDecoder]),
            Objective::L1CleanToFog | Objective::GanGenFog => ComponentSet::of(&[CleanEncoder, FogDecoder]),
            Objective::DiscFog => ComponentSet::of(&[FogDiscriminator]),
            Objective::DiscClean => ComponentSet::of(&[CleanDiscriminator]),
            Objective::Consistency => ComponentSet::of(&[FogEncoder, CleanEncoder, FogDecoder, CleanDecoder]),
            Objective::EpeCross => ComponentSet::of(&[FogEncoder, FlowDecoder]),
            Objective::FlowConsistency => ComponentSet::of(&[FogEncoder, CleanEncoder]),
            // the generator of the fog-side image: clean→fog in the real-clean
            // stage, fog→clean (the clean endpoint) in the real-fog stage
            Objective::Hazeline => match stage {
                Stage::RealFog => ComponentSet::of(&[FogEncoder, CleanDecoder]),
                _ => ComponentSet::of(&[CleanEncoder, FogDecoder]),
            },
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The objectives active in one stage, each with its trainable set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeSchedule {
    pub stage: Stage,
    entries: Vec<(Objective, ComponentSet)>,
}

impl FreezeSchedule {
    /// The full schedule of `stage` under the given switches.
    pub fn for_stage(stage: Stage, hazeline: bool, transform: bool) -> Self {
        use Objective::*;
        let objectives: Vec<Objective> = match stage {
            Stage::Synthetic if !transform => vec![EpeSupFog, EpeSupClean],
            Stage::Synthetic => vec![
                EpeSupFog,
                EpeSupClean,
                L1FogToClean,
                L1CleanToFog,
                GanGenFog,
                GanGenClean,
                DiscFog,
                DiscClean,
            ],
            Stage::RealClean => {
                let mut v = vec![Consistency, EpeCross, GanGenFog, DiscFog];
                if hazeline {
                    v.push(Hazeline);
                }
                v
            }
            Stage::RealFog => {
                let mut v = vec![Consistency, GanGenClean, FlowConsistency, DiscClean];
                if hazeline {
                    v.push(Hazeline);
                }
                v
            }
        };
        let entries = objectives.into_iter().map(|o| (o, o.trainable(stage))).collect();
        Self { stage, entries }
    }

    /// Keeps only the objectives accepted by `keep`.
    pub fn restricted(mut self, keep: impl Fn(Objective) -> bool) -> Self {
        self.entries.retain(|(o, _)| keep(*o));
        self
    }

    pub fn entries(&self) -> &[(Objective, ComponentSet)] {
        &self.entries
    }

    pub fn contains(&self, objective: Objective) -> bool {
        self.entries.iter().any(|(o, _)| *o == objective)
    }

    pub fn trainable(&self, objective: Objective) -> Option<ComponentSet> {
        self.entries.iter().find(|(o, _)| *o == objective).map(|(_, s)| *s)
    }

    /// Generator objectives grouped by identical trainable set, in first-seen order.
    pub fn generator_groups(&self) -> Vec<(ComponentSet, Vec<Objective>)> {
        let mut groups: Vec<(ComponentSet, Vec<Objective>)> = Vec::new();
        for &(o, set) in self.entries.iter().filter(|(o, _)| !o.is_discriminator()) {
            match groups.iter_mut().find(|(s, _)| *s == set) {
                Some((_, v)) => v.push(o),
                None => groups.push((set, vec![o])),
            }
        }
        groups
    }

    /// Every component some objective may update.
    pub fn union(&self) -> ComponentSet {
        self.entries.iter().fold(ComponentSet::EMPTY, |acc, (_, s)| acc.union(*s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_full_cycle_updates_every_component() {
        let all = Stage::CYCLE
            .iter()
            .fold(ComponentSet::EMPTY, |acc, &s| acc.union(FreezeSchedule::for_stage(s, true, true).union()));
        assert_eq!(all, ComponentSet::all());
        assert_eq!(FreezeSchedule::for_stage(Stage::Synthetic, true, true).union(), ComponentSet::all());
    }

    #[test]
    fn stated_freeze_sets() {
        let clean = FreezeSchedule::for_stage(Stage::RealClean, true, true);
        assert!(!clean.trainable(Objective::Consistency).unwrap().contains(FlowDecoder));
        assert_eq!(clean.trainable(Objective::EpeCross), Some(ComponentSet::of(&[FogEncoder, FlowDecoder])));
        let fog = FreezeSchedule::for_stage(Stage::RealFog, true, true);
        assert_eq!(
            fog.trainable(Objective::FlowConsistency),
            Some(ComponentSet::of(&[FogEncoder, CleanEncoder]))
        );
        assert!(!fog.contains(Objective::EpeCross));
        assert!(!FreezeSchedule::for_stage(Stage::RealClean, false, true).contains(Objective::Hazeline));
    }

    #[test]
    fn groups_merge_equal_sets() {
        let clean = FreezeSchedule::for_stage(Stage::RealClean, true, true);
        let groups = clean.generator_groups();
        assert_eq!(groups.len(), 3);
        assert!(groups.iter().any(|(_, o)| o == &vec![Objective::GanGenFog, Objective::Hazeline]));
    }
}
