use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PerturbationPair, Triplet};
use crate::error::{Error, Result};
use crate::io;
use crate::tokenizer::normalize;
use crate::training::ProbeExample;

const GROUP_SLOT: &str = "{group}";
const ATTR_SLOT: &str = "{attr}";
const NOUN_SLOT: &str = "{noun}";

/// Generator settings, usually read from TOML. See `data/default_synth.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Probability that a templated training sentence pairs a group with its
    /// own planted attribute.
    pub skew: f64,
    pub n_sentences: usize,
    /// Share of training sentences drawn from the filler templates.
    pub filler_fraction: f64,
    pub n_pairs: usize,
    /// Held-out triplets per (group, template) cell.
    pub triplets_per_cell: usize,
    pub probe_size: usize,
    pub templates: Vec<String>,
    /// Openings shared by both noun classes, used for probe sentences.
    pub probe_templates: Vec<String>,
    /// Exactly two classes; the probe label is the class index.
    pub noun_classes: Vec<NounClass>,
    pub axes: Vec<Axis>,
}

/// Non-demographic nouns and the filler sentences they appear in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NounClass {
    pub nouns: Vec<String>,
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub pairs: Vec<GroupPair>,
}

/// Two groups whose planted attribute lists are each other's
/// anti-stereotypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPair {
    pub first: String,
    pub second: String,
    pub first_attributes: Vec<String>,
    pub second_attributes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceKind {
    Stereotype,
    AntiStereotype,
    Filler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<String>,
    /// Aligned with `train`.
    pub kinds: Vec<SentenceKind>,
    pub triplets: Vec<Triplet>,
    pub pairs: Vec<PerturbationPair>,
    pub probe: Vec<ProbeExample>,
}

struct Group<'s> {
    axis: &'s str,
    word: &'s str,
    partner: &'s str,
    stereo: &'s [String],
    anti: &'s [String],
}

impl SynthSpec {
    pub fn default_spec() -> Self {
        Self::from_toml(include_str!("../../data/default_synth.toml")).expect("shipped spec is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(0.5..=1.0).contains(&self.skew) {
            return cfg(format!("skew must be in [0.5, 1], got {}", self.skew));
        }
        if !(0.0..1.0).contains(&self.filler_fraction) {
            return cfg(format!("filler_fraction must be in [0, 1), got {}", self.filler_fraction));
        }
        if self.n_sentences == 0 {
            return cfg("n_sentences must be >= 1".into());
        }
        if self.templates.is_empty() || self.probe_templates.is_empty() {
            return cfg("need at least one template and one probe template".into());
        }
        for t in &self.templates {
            slot_check(t, &[(GROUP_SLOT, 1), (ATTR_SLOT, 1)])?;
        }
        if self.noun_classes.len() != 2
            || self
                .noun_classes
                .iter()
                .any(|c| c.nouns.is_empty() || c.templates.is_empty())
        {
            return cfg("noun_classes must hold exactly two classes with nouns and templates".into());
        }
        for t in self.noun_classes.iter().flat_map(|c| &c.templates).chain(&self.probe_templates) {
            slot_check(t, &[(NOUN_SLOT, 1)])?;
        }
        if self.axes.is_empty() || self.axes.iter().any(|a| a.pairs.is_empty() || a.name.trim().is_empty()) {
            return cfg("every axis needs a name and at least one group pair".into());
        }
        let mut seen = HashSet::new();
        let words = self.axes.iter().flat_map(|a| &a.pairs).flat_map(|p| {
            [&p.first, &p.second]
                .into_iter()
                .chain(&p.first_attributes)
                .chain(&p.second_attributes)
        });
        for w in words.chain(self.noun_classes.iter().flat_map(|c| &c.nouns)) {
            if normalize(w) != [w.as_str()] {
                return cfg(format!("`{w}` is not a single normalized token"));
            }
            if !seen.insert(w.as_str()) {
                return cfg(format!("`{w}` is used in more than one role"));
            }
        }
        for p in self.axes.iter().flat_map(|a| &a.pairs) {
            if p.first_attributes.is_empty() || p.second_attributes.is_empty() {
                return cfg(format!("group pair {}/{} needs attributes on both sides", p.first, p.second));
            }
            if self.triplets_per_cell > p.first_attributes.len().min(p.second_attributes.len()) {
                return cfg("triplets_per_cell exceeds the attribute list length".into());
            }
        }
        Ok(())
    }

    fn groups(&self) -> Vec<Group<'_>> {
        let mut out = Vec::new();
        for axis in &self.axes {
            for p in &axis.pairs {
                out.push(Group {
                    axis: &axis.name,
                    word: &p.first,
                    partner: &p.second,
                    stereo: &p.first_attributes,
                    anti: &p.second_attributes,
                });
                out.push(Group {
                    axis: &axis.name,
                    word: &p.second,
                    partner: &p.first,
                    stereo: &p.second_attributes,
                    anti: &p.first_attributes,
                });
            }
        }
        out
    }
}

fn slot_check(template: &str, slots: &[(&str, usize)]) -> Result<()> {
    for &(slot, want) in slots {
        let whole = template.split_whitespace().filter(|w| *w == slot).count();
        if whole != want || template.matches(slot).count() != want {
            return Err(Error::Config(format!(
                "template `{template}` must contain `{slot}` exactly {want} time(s) as a whole word"
            )));
        }
    }
    Ok(())
}

fn fill(template: &str, group: &str, attr: &str) -> String {
    template.replace(GROUP_SLOT, group).replace(ATTR_SLOT, attr)
}

/// Generates the training corpus, held-out triplets, perturbation pairs and
/// probe task. Identical specs give identical output.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups = spec.groups();
    let nouns: Vec<&String> = spec.noun_classes.iter().flat_map(|c| &c.nouns).collect();

    let mut triplets = Vec::new();
    let mut held_out = HashSet::new();
    for g in &groups {
        for t in &spec.templates {
            let stereo: Vec<&String> = g.stereo.choose_multiple(&mut rng, spec.triplets_per_cell).collect();
            let anti: Vec<&String> = g.anti.choose_multiple(&mut rng, spec.triplets_per_cell).collect();
            for (s, a) in stereo.into_iter().zip(anti) {
                let noun = nouns.choose(&mut rng).expect("nouns non-empty");
                let trip = Triplet {
                    domain: g.axis.to_string(),
                    target: g.word.to_string(),
                    stereotype: fill(t, g.word, s),
                    anti_stereotype: fill(t, g.word, a),
                    unrelated: fill(t, g.word, noun),
                };
                held_out.insert(trip.stereotype.clone());
                held_out.insert(trip.anti_stereotype.clone());
                held_out.insert(trip.unrelated.clone());
                triplets.push(trip);
            }
        }
    }

    let n_filler = (spec.n_sentences as f64 * spec.filler_fraction).round() as usize;
    let mut rows: Vec<(String, SentenceKind, Option<(String, &str)>)> = Vec::with_capacity(spec.n_sentences);
    while rows.len() < spec.n_sentences - n_filler {
        let g = groups.choose(&mut rng).expect("groups non-empty");
        let t = spec.templates.choose(&mut rng).expect("templates non-empty");
        let stereo = rng.random_bool(spec.skew);
        let (attrs, kind) = if stereo {
            (g.stereo, SentenceKind::Stereotype)
        } else {
            (g.anti, SentenceKind::AntiStereotype)
        };
        let a = attrs.choose(&mut rng).expect("attributes non-empty");
        let text = fill(t, g.word, a);
        if held_out.contains(&text) {
            continue;
        }
        let swapped = (kind == SentenceKind::Stereotype).then(|| (fill(t, g.partner, a), g.axis));
        rows.push((text, kind, swapped));
    }
    for _ in 0..n_filler {
        let class = spec.noun_classes.choose(&mut rng).expect("two classes");
        let t = class.templates.choose(&mut rng).expect("templates non-empty");
        let noun = class.nouns.choose(&mut rng).expect("nouns non-empty");
        rows.push((t.replace(NOUN_SLOT, noun), SentenceKind::Filler, None));
    }
    rows.shuffle(&mut rng);

    let mut pairs = Vec::new();
    for (text, _, swapped) in &rows {
        if pairs.len() == spec.n_pairs {
            break;
        }
        if let Some((p, axis)) = swapped.as_ref().filter(|(p, _)| !held_out.contains(p)) {
            pairs.push(PerturbationPair {
                original: text.clone(),
                perturbed: p.clone(),
                axis: axis.to_string(),
            });
        }
    }

    let half = spec.probe_size / 2;
    let probe = (0..spec.probe_size)
        .map(|i| {
            let label = i % 2;
            let t = spec.probe_templates.choose(&mut rng).expect("probe templates non-empty");
            let noun = spec.noun_classes[label].nouns.choose(&mut rng).expect("class non-empty");
            ProbeExample {
                text: t.replace(NOUN_SLOT, noun),
                label,
                split: if i < half { "train" } else { "test" }.to_string(),
            }
        })
        .collect();

    let (train, kinds) = rows.into_iter().map(|(t, k, _)| (t, k)).unzip();
    Ok(SynthCorpus {
        train,
        kinds,
        triplets,
        pairs,
        probe,
    })
}

impl SynthCorpus {
    pub fn count(&self, kind: SentenceKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    /// The perturbed side of every pair, the only text debiasing trains on.
    pub fn perturbed(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.perturbed.clone()).collect()
    }

    /// Writes `corpus.txt`, `triplets.jsonl`, `pairs.jsonl` and `probe.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let paths = ["corpus.txt", "triplets.jsonl", "pairs.jsonl", "probe.jsonl"].map(|f| dir.join(f));
        io::write_lines(&paths[0], &self.train)?;
        io::write_jsonl(&paths[1], &self.triplets)?;
        io::write_jsonl(&paths[2], &self.pairs)?;
        io::write_jsonl(&paths[3], &self.probe)?;
        Ok(paths.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(skew: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            skew,
            seed,
            n_sentences: 1500,
            n_pairs: 200,
            ..SynthSpec::default_spec()
        }
    }

    #[test]
    fn default_spec_shape() {
        let s = SynthSpec::default_spec();
        assert_eq!(s.axes.len(), 2);
        assert_eq!(s.groups().len(), 4);
        assert!(s.groups().iter().all(|g| g.stereo.len() == 6));
        assert_eq!(SynthSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn full_skew_has_no_anti_sentences() {
        let c = generate_corpus(&small(1.0, 3)).unwrap();
        assert_eq!(c.count(SentenceKind::AntiStereotype), 0);
        assert_eq!(c.train.len(), 1500);
        assert_eq!(c.count(SentenceKind::Filler), 300);
    }

    #[test]
    fn half_skew_is_balanced_and_reproducible() {
        let c = generate_corpus(&small(0.5, 11)).unwrap();
        let (s, a) = (c.count(SentenceKind::Stereotype), c.count(SentenceKind::AntiStereotype));
        let n = (s + a) as f64;
        assert!(((s as f64) - n / 2.0).abs() < 3.0 * (n * 0.25).sqrt(), "{s} vs {a}");
        let again = generate_corpus(&small(0.5, 11)).unwrap();
        assert_eq!(again, c);
        assert_ne!(generate_corpus(&small(0.5, 12)).unwrap().train, c.train);
    }

    #[test]
    fn pairs_swap_exactly_the_group_word() {
        let spec = small(0.9, 5);
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.pairs.len(), 200);
        let groups: HashSet<&str> = spec.groups().iter().map(|g| g.word).collect();
        for p in &c.pairs {
            let (o, q) = (normalize(&p.original), normalize(&p.perturbed));
            assert_eq!(o.len(), q.len());
            let diff: Vec<usize> = (0..o.len()).filter(|&i| o[i] != q[i]).collect();
            assert_eq!(diff.len(), 1, "{p:?}");
            assert!(groups.contains(o[diff[0]].as_str()) && groups.contains(q[diff[0]].as_str()));
        }
    }

    #[test]
    fn held_out_never_leaks() {
        let c = generate_corpus(&small(0.9, 9)).unwrap();
        let train: HashSet<&String> = c.train.iter().collect();
        let tuned: HashSet<&String> = c.pairs.iter().map(|p| &p.perturbed).collect();
        for t in &c.triplets {
            for (_, s) in t.sentences() {
                assert!(!train.contains(&s.to_string()) && !tuned.contains(&s.to_string()), "{s}");
            }
        }
        assert_eq!(c.triplets.len(), 4 * 12 * 2);
    }

    #[test]
    fn probe_is_balanced() {
        let c = generate_corpus(&small(0.9, 1)).unwrap();
        for split in ["train", "test"] {
            let ex: Vec<_> = c.probe.iter().filter(|e| e.split == split).collect();
            let ones = ex.iter().filter(|e| e.label == 1).count();
            assert!(ones.abs_diff(ex.len() - ones) <= 1);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SynthSpec {
            skew: 0.4,
            ..SynthSpec::default_spec()
        };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
        let mut two_slots = SynthSpec::default_spec();
        two_slots.templates.push("{group} and {group} are {attr}".into());
        assert!(two_slots.validate().is_err());
        let mut glued = SynthSpec::default_spec();
        glued.templates.push("the {group}s are {attr}".into());
        assert!(glued.validate().is_err());
        assert!(SynthSpec::from_toml("seed = 1").is_err());
    }
}
