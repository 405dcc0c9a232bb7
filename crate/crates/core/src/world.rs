//! Synthetic compositional retrieval worlds.
//!
//! Every item is a vector of attribute values. A query edits some attribute
//! slots of a reference item; its target is the exact edit, and each query
//! plants confusables that get every edit right but one. Because the ground
//! truth is known, the same world also answers oracle questions exactly.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_json, read_jsonl, write_json, write_jsonl};
use crate::numeric::Vector;
use crate::seed;
use crate::triplet::Triplet;

/// Candidates per query in the subset metric.
pub const SUBSET_SIZE: usize = 6;

const SLOT_NAMES: [&str; 8] = [
    "color", "shape", "size", "texture", "pattern", "material", "length", "fit",
];
const VALUE_NAMES: [&str; 10] = [
    "red", "blue", "green", "black", "white", "yellow", "purple", "orange", "gray", "pink",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    /// Background items; targets and confusables are added on top.
    pub num_items: usize,
    pub num_queries: usize,
    pub edits_per_query: usize,
    pub confusables_per_query: usize,
    pub feature_noise_sigma: f64,
    pub seed: u64,
    /// Trailing fraction of queries held out for evaluation.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_attributes: 6,
            values_per_attribute: 5,
            num_items: 2000,
            num_queries: 1000,
            edits_per_query: 1,
            confusables_per_query: 3,
            feature_noise_sigma: 0.05,
            seed: 7,
            test_fraction: default_test_fraction(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let a = self.num_attributes;
        let v = self.values_per_attribute;
        let fail = |msg: String| Err(Error::Argument(msg));
        if a < 2 || v < 2 {
            return fail(format!("need at least 2 attributes and 2 values, got {a}x{v}"));
        }
        if self.edits_per_query == 0 || self.edits_per_query > a {
            return fail(format!("edits_per_query must be in 1..={a}"));
        }
        if self.confusables_per_query == 0 {
            return fail("confusables_per_query must be at least 1".into());
        }
        if self.confusables_per_query + 1 > SUBSET_SIZE {
            return fail(format!(
                "{} confusables do not fit a subset of {SUBSET_SIZE}",
                self.confusables_per_query
            ));
        }
        // each confusable moves one edited slot to a value that is neither the
        // reference's nor the target's
        let capacity = self.edits_per_query * v.saturating_sub(2);
        if self.confusables_per_query > capacity {
            return fail(format!(
                "only {capacity} distinct confusables exist for {} edits over {v} values",
                self.edits_per_query
            ));
        }
        let combos = (v as u128).checked_pow(a as u32).unwrap_or(u128::MAX);
        let needed = self.num_items as u128
            + self.num_queries as u128 * (1 + self.confusables_per_query as u128);
        if (self.num_items as u128) < SUBSET_SIZE as u128 || combos < needed {
            return fail(format!(
                "{v}^{a} attribute combinations cannot host {} items and {} queries",
                self.num_items, self.num_queries
            ));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return fail("feature_noise_sigma must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail("test_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn image_dim(&self) -> usize {
        self.num_attributes * self.values_per_attribute
    }

    pub fn text_dim(&self) -> usize {
        self.image_dim()
    }

    pub fn train_query_count(&self) -> usize {
        ((self.num_queries as f64) * (1.0 - self.test_fraction)).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edit {
    pub slot: usize,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub attributes: Vec<usize>,
    pub image_feature: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub query_id: String,
    pub candidates: Vec<String>,
}

/// Names for attribute slots and values, and the instruction grammar
/// `change <slot> to <value> [and change <slot> to <value> ...]`.
#[derive(Debug, Clone)]
pub struct Grammar {
    slots: Vec<String>,
    values: Vec<String>,
}

impl Grammar {
    pub fn new(num_attributes: usize, values_per_attribute: usize) -> Self {
        let name = |names: &[&str], prefix: &str, i: usize| {
            names
                .get(i)
                .map_or_else(|| format!("{prefix}{i}"), |s| s.to_string())
        };
        Grammar {
            slots: (0..num_attributes).map(|i| name(&SLOT_NAMES, "attr", i)).collect(),
            values: (0..values_per_attribute).map(|i| name(&VALUE_NAMES, "val", i)).collect(),
        }
    }

    pub fn slot_name(&self, slot: usize) -> &str {
        &self.slots[slot]
    }

    pub fn value_name(&self, value: usize) -> &str {
        &self.values[value]
    }

    pub fn render_intent(&self, edit: Edit) -> String {
        format!("change {} to {}", self.slots[edit.slot], self.values[edit.value])
    }

    pub fn render(&self, edits: &[Edit]) -> String {
        edits
            .iter()
            .map(|e| self.render_intent(*e))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    /// Splits an instruction into its intent strings.
    pub fn intents(text: &str) -> Vec<String> {
        text.split(" and ").map(|s| s.trim().to_string()).collect()
    }

    pub fn parse_intent(&self, intent: &str) -> Result<Edit> {
        let tokens: Vec<&str> = intent.split_whitespace().collect();
        match tokens.as_slice() {
            ["change", slot, "to", value] => {
                let slot = self
                    .slots
                    .iter()
                    .position(|s| s == slot)
                    .ok_or_else(|| Error::Data(format!("unknown attribute '{slot}'")))?;
                let value = self
                    .values
                    .iter()
                    .position(|v| v == value)
                    .ok_or_else(|| Error::Data(format!("unknown value '{value}'")))?;
                Ok(Edit { slot, value })
            }
            _ => Err(Error::Data(format!("not an intent: '{intent}'"))),
        }
    }

    /// Inverse of [`render`](Self::render). Slots must be distinct.
    pub fn parse(&self, text: &str) -> Result<Vec<Edit>> {
        if text.trim().is_empty() {
            return Err(Error::Data("empty instruction".into()));
        }
        let edits = Self::intents(text)
            .iter()
            .map(|i| self.parse_intent(i))
            .collect::<Result<Vec<_>>>()?;
        for (i, e) in edits.iter().enumerate() {
            if edits[..i].iter().any(|p| p.slot == e.slot) {
                return Err(Error::Data(format!(
                    "attribute '{}' edited twice",
                    self.slots[e.slot]
                )));
            }
        }
        Ok(edits)
    }

    /// Question posed to the verifier about one intent.
    pub fn question(&self, edit: Edit) -> String {
        format!("is the {} {}?", self.slots[edit.slot], self.values[edit.value])
    }

    pub fn parse_question(&self, question: &str) -> Result<Edit> {
        let body = question
            .strip_prefix("is the ")
            .and_then(|q| q.strip_suffix('?'))
            .ok_or_else(|| Error::Data(format!("not a question: '{question}'")))?;
        let (slot, value) = body
            .split_once(' ')
            .ok_or_else(|| Error::Data(format!("not a question: '{question}'")))?;
        self.parse_intent(&format!("change {slot} to {value}"))
    }
}

/// A parsed instruction and its multi-hot text feature over `(slot, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldInstruction {
    pub edits: Vec<Edit>,
    pub text: String,
    pub text_feature: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub items: Vec<Item>,
    pub queries: Vec<Triplet>,
    pub subsets: Vec<Subset>,
    grammar: Grammar,
    by_id: HashMap<String, usize>,
}

fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

fn query_id(i: usize) -> String {
    format!("q{i:05}")
}

struct Builder<'a> {
    spec: &'a WorldSpec,
    items: Vec<Item>,
    by_attrs: HashMap<Vec<usize>, usize>,
}

impl Builder<'_> {
    fn feature(&self, index: usize, attrs: &[usize]) -> Vector {
        let v = self.spec.values_per_attribute;
        let mut f = vec![0.0; self.spec.image_dim()];
        for (slot, value) in attrs.iter().enumerate() {
            f[slot * v + value] = 1.0;
        }
        if self.spec.feature_noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_index(
                self.spec.seed,
                "item-noise",
                index as u64,
            ));
            let normal = Normal::new(0.0, self.spec.feature_noise_sigma).expect("sigma validated");
            f.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        Vector::new(f).expect("finite by construction")
    }

    fn get_or_create(&mut self, attrs: Vec<usize>) -> usize {
        if let Some(&i) = self.by_attrs.get(&attrs) {
            return i;
        }
        let index = self.items.len();
        let image_feature = self.feature(index, &attrs);
        self.items.push(Item {
            id: item_id(index),
            attributes: attrs.clone(),
            image_feature,
        });
        self.by_attrs.insert(attrs, index);
        index
    }
}

impl World {
    /// Deterministic in `spec`.
    pub fn generate(spec: &WorldSpec) -> Result<World> {
        spec.validate()?;
        let a = spec.num_attributes;
        let v = spec.values_per_attribute;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut b = Builder {
            spec,
            items: Vec::new(),
            by_attrs: HashMap::new(),
        };
        while b.items.len() < spec.num_items {
            let attrs: Vec<usize> = (0..a).map(|_| rng.random_range(0..v)).collect();
            b.get_or_create(attrs);
        }

        let grammar = Grammar::new(a, v);
        let mut queries = Vec::with_capacity(spec.num_queries);
        let mut subsets = Vec::with_capacity(spec.num_queries);
        for q in 0..spec.num_queries {
            let reference = rng.random_range(0..spec.num_items);
            let ref_attrs = b.items[reference].attributes.clone();
            let mut slots = sample(&mut rng, a, spec.edits_per_query).into_vec();
            slots.sort_unstable();
            let edits: Vec<Edit> = slots
                .iter()
                .map(|&slot| {
                    // uniform over the v-1 values that differ from the reference
                    let mut value = rng.random_range(0..v - 1);
                    if value >= ref_attrs[slot] {
                        value += 1;
                    }
                    Edit { slot, value }
                })
                .collect();
            let target_attrs = apply_edits(&ref_attrs, &edits);
            let target = b.get_or_create(target_attrs.clone());

            let mut wrong: Vec<Edit> = Vec::new();
            for e in &edits {
                for value in 0..v {
                    if value != e.value && value != ref_attrs[e.slot] {
                        wrong.push(Edit { slot: e.slot, value });
                    }
                }
            }
            let confusables: Vec<usize> = sample(&mut rng, wrong.len(), spec.confusables_per_query)
                .into_iter()
                .map(|i| b.get_or_create(apply_edits(&target_attrs, &[wrong[i]])))
                .collect();

            let mut candidates: Vec<usize> = std::iter::once(target).chain(confusables).collect();
            while candidates.len() < SUBSET_SIZE {
                let filler = rng.random_range(0..b.items.len());
                if filler != reference && !candidates.contains(&filler) {
                    candidates.push(filler);
                }
            }

            let qid = query_id(q);
            queries.push(Triplet {
                query_id: qid.clone(),
                reference_id: item_id(reference),
                instruction: grammar.render(&edits),
                target_id: item_id(target),
            });
            subsets.push(Subset {
                query_id: qid,
                candidates: candidates.into_iter().map(item_id).collect(),
            });
        }
        Ok(World::assemble(spec.clone(), b.items, queries, subsets))
    }

    fn assemble(spec: WorldSpec, items: Vec<Item>, queries: Vec<Triplet>, subsets: Vec<Subset>) -> World {
        let by_id = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.clone(), i))
            .collect();
        World {
            grammar: Grammar::new(spec.num_attributes, spec.values_per_attribute),
            spec,
            items,
            queries,
            subsets,
            by_id,
        }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn item(&self, id: &str) -> Result<&Item> {
        self.by_id
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Data(format!("unknown item id {id}")))
    }

    pub fn train_queries(&self) -> &[Triplet] {
        &self.queries[..self.spec.train_query_count().min(self.queries.len())]
    }

    pub fn test_queries(&self) -> &[Triplet] {
        &self.queries[self.spec.train_query_count().min(self.queries.len())..]
    }

    pub fn subset(&self, query_id: &str) -> Option<&Subset> {
        // subsets are stored in query order
        self.subsets
            .binary_search_by(|s| s.query_id.as_str().cmp(query_id))
            .ok()
            .map(|i| &self.subsets[i])
    }

    pub fn instruction(&self, text: &str) -> Result<WorldInstruction> {
        let edits = self.grammar.parse(text)?;
        let v = self.spec.values_per_attribute;
        let mut text_feature = vec![0.0; self.spec.text_dim()];
        for e in &edits {
            text_feature[e.slot * v + e.value] = 1.0;
        }
        Ok(WorldInstruction {
            edits,
            text: text.to_string(),
            text_feature,
        })
    }

    /// Image feature of the reference and text feature of the instruction.
    pub fn query_features(&self, triplet: &Triplet) -> Result<(&[f64], Vec<f64>)> {
        let image = &self.item(&triplet.reference_id)?.image_feature;
        Ok((image, self.instruction(&triplet.instruction)?.text_feature))
    }

    pub fn target_feature(&self, id: &str) -> Result<&[f64]> {
        Ok(&self.item(id)?.image_feature)
    }

    /// Slots whose values differ between the two items, with `to`'s values.
    pub fn ground_truth_diff(&self, from_id: &str, to_id: &str) -> Result<Vec<Edit>> {
        let from = self.item(from_id)?;
        let to = self.item(to_id)?;
        Ok(attribute_diff(&from.attributes, &to.attributes))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_json(&dir.join("spec.json"), &self.spec)?;
        write_jsonl(&dir.join("items.jsonl"), &self.items)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("subsets.jsonl"), &self.subsets)
    }

    pub fn load(dir: &Path) -> Result<World> {
        let spec: WorldSpec = read_json(&dir.join("spec.json"))?;
        spec.validate()?;
        let items: Vec<Item> = read_jsonl(&dir.join("items.jsonl"))?;
        let queries: Vec<Triplet> = read_jsonl(&dir.join("queries.jsonl"))?;
        let subsets: Vec<Subset> = read_jsonl(&dir.join("subsets.jsonl"))?;
        World::from_parts(spec, items, queries, subsets)
    }

    /// Assembles a world from explicit parts, checking that every item fits
    /// `spec` and every query and subset resolves.
    pub fn from_parts(spec: WorldSpec, items: Vec<Item>, queries: Vec<Triplet>, subsets: Vec<Subset>) -> Result<World> {
        spec.validate()?;
        for it in &items {
            if it.attributes.len() != spec.num_attributes
                || it.attributes.iter().any(|&x| x >= spec.values_per_attribute)
                || it.image_feature.dim() != spec.image_dim()
            {
                return Err(Error::Data(format!("item {} does not fit the world spec", it.id)));
            }
        }
        let world = World::assemble(spec, items, queries, subsets);
        if world.by_id.len() != world.items.len() {
            return Err(Error::Data("duplicate item ids".into()));
        }
        for q in &world.queries {
            q.validate()?;
            world.item(&q.reference_id)?;
            world.item(&q.target_id)?;
            world.grammar.parse(&q.instruction)?;
        }
        if world.subsets.len() != world.queries.len()
            || world.subsets.iter().zip(&world.queries).any(|(s, q)| s.query_id != q.query_id)
        {
            return Err(Error::Data("subsets do not align with queries".into()));
        }
        if world.queries.windows(2).any(|w| w[0].query_id >= w[1].query_id) {
            return Err(Error::Data("query ids must be unique and ascending".into()));
        }
        for s in &world.subsets {
            for c in &s.candidates {
                world.item(c)?;
            }
        }
        Ok(world)
    }
}

pub fn apply_edits(attrs: &[usize], edits: &[Edit]) -> Vec<usize> {
    let mut out = attrs.to_vec();
    for e in edits {
        out[e.slot] = e.value;
    }
    out
}

pub fn attribute_diff(from: &[usize], to: &[usize]) -> Vec<Edit> {
    from.iter()
        .zip(to)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(slot, (_, &value))| Edit { slot, value })
        .collect()
}
