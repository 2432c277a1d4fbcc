//! Synthetic recipes with a planted phase structure.
//!
//! Every dish owns an ingredient list and, for each cooking phase
//! (prepare, combine, cook, finish), a pool of sentences. A sample picks a
//! dish, a sentence count, splits the count over the phases and draws an
//! order-preserving subset of each phase pool. The planted tree is
//! `root -> phase nodes -> sentence leaves`. The image key spells out the
//! dish and the per-phase counts, so image features derived from it carry
//! the structure.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Partition, RecipeSample};
use crate::error::{Result, SgnError};
use crate::treekit::SentenceTree;

pub const PHASES: [&str; 4] = ["prepare", "combine", "cook", "finish"];

/// Longest instruction list the tree capacity is sized for.
pub const MAX_SENTENCES: usize = 19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Target lexicon size; the ingredient list is trimmed to fit.
    pub vocab_size: usize,
    pub dishes: usize,
    pub ingredients_per_dish: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Number of phases used, taken from the front of [`PHASES`].
    pub phases: usize,
    /// Sentences available per phase for each dish (at most 9).
    pub phase_pool: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
            vocab_size: 300,
            dishes: 40,
            ingredients_per_dish: 6,
            min_sentences: 4,
            max_sentences: 12,
            phases: 4,
            phase_pool: 5,
        }
    }
}

impl SyntheticConfig {
    pub fn size(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SgnError::Config(m));
        if self.min_sentences < 1 || self.max_sentences > MAX_SENTENCES || self.min_sentences > self.max_sentences {
            return err(format!(
                "sentence-count range [{}, {}] must lie within [1, {MAX_SENTENCES}]",
                self.min_sentences, self.max_sentences
            ));
        }
        if self.phases == 0 || self.phases > PHASES.len() {
            return err(format!("phases must be in 1..={}", PHASES.len()));
        }
        if self.phase_pool == 0 || self.phase_pool > 9 {
            return err("phase_pool must be in 1..=9".into());
        }
        if self.max_sentences > self.phases * self.phase_pool {
            return err(format!(
                "max_sentences {} exceeds phases x phase_pool = {}",
                self.max_sentences,
                self.phases * self.phase_pool
            ));
        }
        if self.dishes == 0 || self.ingredients_per_dish < 2 {
            return err("need at least one dish and two ingredients per dish".into());
        }
        let core = core_lexicon_size();
        if self.vocab_size < core + self.ingredients_per_dish {
            return err(format!("vocab_size {} is below the fixed lexicon of {core} words", self.vocab_size));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SgnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parsed form of a synthetic image key: `d{dish}-{counts}-{index}`, with
/// one digit per phase in `counts`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StructureKey {
    pub dish: usize,
    pub counts: Vec<usize>,
    pub index: usize,
}

impl fmt::Display for StructureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{:03}-", self.dish)?;
        for c in &self.counts {
            write!(f, "{c}")?;
        }
        write!(f, "-{:05}", self.index)
    }
}

impl FromStr for StructureKey {
    type Err = SgnError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SgnError::Lookup(format!("not a synthetic image key: {s:?}"));
        let mut parts = s.split('-');
        let (dish, counts, index) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(d), Some(c), Some(i), None) => (d, c, i),
            _ => return Err(bad()),
        };
        let dish = dish.strip_prefix('d').and_then(|d| d.parse().ok()).ok_or_else(bad)?;
        let counts = counts
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .filter(|c| !c.is_empty() && c.len() <= PHASES.len())
            .ok_or_else(bad)?;
        let index = index.parse().map_err(|_| bad())?;
        Ok(Self { dish, counts, index })
    }
}

const FUNCTION_WORDS: &[&str] = &["the", "a", "with", "and", "in", "for", "into", "over", "until", "to", "minutes", "heat", "let", "rest", "at"];
const PREP_VERBS: &[&str] = &["chop", "dice", "slice", "peel", "rinse", "mince", "grate", "trim", "crush", "soak", "drain", "halve", "shred", "cube", "wash", "pat"];
const PREP_MANNER: &[&str] = &["finely", "roughly", "thinly", "evenly", "carefully", "lightly", "well", "coarsely"];
const SHAPES: &[&str] = &["cubes", "strips", "wedges", "rounds", "halves", "pieces", "slices", "chunks"];
const MIX_VERBS: &[&str] = &["mix", "whisk", "toss", "stir", "fold", "combine", "blend", "beat", "coat", "season"];
const MIX_MANNER: &[&str] = &["together", "gently", "thoroughly", "quickly", "briefly"];
const VESSELS: &[&str] = &["bowl", "pan", "pot", "skillet", "jar", "saucepan", "tray", "wok", "blender", "dish"];
const COOK_VERBS: &[&str] = &["bake", "fry", "simmer", "boil", "roast", "grill", "saute", "steam", "broil", "braise", "toast", "sear"];
const HEAT: &[&str] = &["low", "medium", "high", "gentle"];
const APPLIANCES: &[&str] = &["oven", "grill", "steamer", "broiler"];
const DONENESS: &[&str] = &["golden", "tender", "crisp", "bubbling", "browned", "soft", "thick", "fragrant", "cooked", "done"];
const FINISH_VERBS: &[&str] = &["garnish", "serve", "top", "sprinkle", "drizzle", "plate", "cool", "chill", "transfer", "dust"];
const FINISH_MANNER: &[&str] = &["warm", "immediately", "hot", "cold", "chilled"];
const GARNISHES: &[&str] = &[
    "parsley", "cilantro", "basil", "chives", "mint", "sesame", "lemon", "paprika", "pepper", "salt", "cream", "cheese", "oil", "seeds",
    "zest", "dill", "thyme", "nuts", "yogurt", "honey",
];
const DISH_NOUNS: &[&str] = &["soup", "stew", "salad", "curry", "pie", "casserole", "pasta", "risotto", "tart", "gratin", "skewers", "stir-fry", "omelette", "bake"];
const ADJECTIVES: &[&str] = &["spicy", "creamy", "rustic", "classic", "easy", "quick", "hearty", "fresh", "smoky", "tangy", "sweet", "simple"];
const NUMBERS: &[&str] = &["1", "2", "3", "4", "5", "10", "15", "20", "25", "30", "45"];
const UNITS: &[&str] = &["cup", "cups", "tablespoons", "teaspoon", "grams", "pinch", "cloves"];
const INGREDIENTS: &[&str] = &[
    "onion", "garlic", "tomato", "carrot", "potato", "celery", "leek", "pepper", "chili", "ginger", "spinach", "kale", "cabbage",
    "broccoli", "cauliflower", "zucchini", "eggplant", "mushroom", "pea", "corn", "bean", "lentil", "chickpea", "rice", "quinoa",
    "barley", "noodle", "flour", "sugar", "butter", "egg", "milk", "chicken", "beef", "pork", "lamb", "turkey", "bacon", "sausage",
    "shrimp", "salmon", "tuna", "cod", "tofu", "apple", "pear", "banana", "lime", "orange", "mango", "peach", "cherry", "berry",
    "raisin", "date", "almond", "walnut", "peanut", "cashew", "coconut", "oat", "bread", "tortilla", "cumin", "turmeric",
    "cinnamon", "nutmeg", "clove", "vanilla", "cocoa", "vinegar", "mustard", "ketchup", "mayonnaise", "soy", "broth", "wine",
    "beer", "water", "squash", "pumpkin", "beet", "radish", "turnip", "fennel", "asparagus", "artichoke", "olive", "caper",
    "anchovy", "avocado", "cucumber", "lettuce", "arugula", "shallot", "scallion", "jalapeno", "paneer", "ricotta", "feta",
    "mozzarella", "cheddar", "parmesan", "ham", "duck", "crab", "mussel", "clam", "oyster", "scallop", "trout", "halibut",
    "sardine", "yam", "plantain", "okra", "chard", "endive", "watercress", "sorrel", "rhubarb", "fig", "plum", "apricot",
    "grape", "melon", "kiwi", "papaya", "guava",
];

fn core_lexicon() -> Vec<&'static str> {
    let lists: &[&[&str]] = &[
        FUNCTION_WORDS, PREP_VERBS, PREP_MANNER, SHAPES, MIX_VERBS, MIX_MANNER, VESSELS, COOK_VERBS, HEAT, APPLIANCES, DONENESS,
        FINISH_VERBS, FINISH_MANNER, GARNISHES, DISH_NOUNS, ADJECTIVES, NUMBERS, UNITS,
    ];
    let mut words: Vec<&str> = lists.iter().flat_map(|l| l.iter().copied()).collect();
    words.sort_unstable();
    words.dedup();
    words
}

fn core_lexicon_size() -> usize {
    core_lexicon().len()
}

/// Ingredient words not already in the fixed lexicon, trimmed so the whole
/// lexicon has about `vocab_size` words.
fn ingredient_lexicon(vocab_size: usize) -> Vec<&'static str> {
    let core = core_lexicon();
    let mut fresh: Vec<&str> = INGREDIENTS.iter().copied().filter(|w| !core.contains(w)).collect();
    fresh.dedup();
    fresh.truncate(vocab_size.saturating_sub(core.len()));
    fresh
}

struct Dish {
    title: String,
    ingredients: Vec<Vec<String>>,
    /// `pools[phase]` holds the ordered candidate sentences.
    pools: Vec<Vec<Vec<String>>>,
}

fn pick<'a>(rng: &mut impl Rng, list: &[&'a str]) -> &'a str {
    list.choose(rng).copied().unwrap()
}

fn phase_sentence(phase: usize, rng: &mut impl Rng, ing: &[&str], noun: &str) -> String {
    let i = pick(rng, ing);
    let j = loop {
        let j = pick(rng, ing);
        if j != i {
            break j;
        }
    };
    let num = pick(rng, &NUMBERS[4..]);
    match (phase, rng.gen_range(0..3)) {
        (0, 0) => format!("{} the {i} {}", pick(rng, PREP_VERBS), pick(rng, PREP_MANNER)),
        (0, 1) => format!("{} the {i} into {}", pick(rng, PREP_VERBS), pick(rng, SHAPES)),
        (0, _) => format!("{} the {i} and the {j}", pick(rng, PREP_VERBS)),
        (1, 0) => format!("{} the {i} with the {j} in a {}", pick(rng, MIX_VERBS), pick(rng, VESSELS)),
        (1, 1) => format!("{} the {i} and {j} {}", pick(rng, MIX_VERBS), pick(rng, MIX_MANNER)),
        (1, _) => format!("add the {i} to the {} and {}", pick(rng, VESSELS), pick(rng, MIX_VERBS)),
        (2, 0) => format!("{} the {i} over {} heat until {}", pick(rng, COOK_VERBS), pick(rng, HEAT), pick(rng, DONENESS)),
        (2, 1) => format!("{} in the {} until {}", pick(rng, COOK_VERBS), pick(rng, APPLIANCES), pick(rng, DONENESS)),
        (2, _) => format!("{} the {i} for {num} minutes at {} heat", pick(rng, COOK_VERBS), pick(rng, HEAT)),
        (_, 0) => format!("{} with {} and {}", pick(rng, FINISH_VERBS), pick(rng, &GARNISHES[..10]), pick(rng, &GARNISHES[10..])),
        (_, 1) => format!("{} the {noun} {}", pick(rng, FINISH_VERBS), pick(rng, FINISH_MANNER)),
        (_, _) => format!("let the {noun} rest for {num} minutes"),
    }
}

fn make_dish(rng: &mut impl Rng, cfg: &SyntheticConfig, lexicon: &[&'static str]) -> Dish {
    let chosen: Vec<&str> = lexicon.choose_multiple(rng, cfg.ingredients_per_dish.min(lexicon.len())).copied().collect();
    let noun = pick(rng, DISH_NOUNS);
    let title = format!("{} {} {noun}", pick(rng, ADJECTIVES), chosen[0]);
    let ingredients = chosen
        .iter()
        .map(|ing| vec![pick(rng, &NUMBERS[..5]).to_string(), pick(rng, UNITS).to_string(), ing.to_string()])
        .collect();
    let pools = (0..cfg.phases)
        .map(|phase| {
            let mut pool: Vec<String> = Vec::with_capacity(cfg.phase_pool);
            while pool.len() < cfg.phase_pool {
                let s = phase_sentence(phase, rng, &chosen, noun);
                if !pool.contains(&s) {
                    pool.push(s);
                }
            }
            pool.into_iter().map(|s| s.split(' ').map(str::to_string).collect()).collect()
        })
        .collect();
    Dish { title, ingredients, pools }
}

/// Splits `total` sentences over phases, each phase capped at `pool`.
/// When `total >= phases` every phase gets at least one sentence.
fn phase_counts(rng: &mut impl Rng, total: usize, phases: usize, pool: usize) -> Vec<usize> {
    let mut counts = vec![0; phases];
    if total < phases {
        let mut which: Vec<usize> = rand::seq::index::sample(rng, phases, total).into_vec();
        which.sort_unstable();
        for p in which {
            counts[p] = 1;
        }
        return counts;
    }
    counts.iter_mut().for_each(|c| *c = 1);
    for _ in phases..total {
        let open: Vec<usize> = (0..phases).filter(|&p| counts[p] < pool).collect();
        counts[*open.choose(rng).unwrap()] += 1;
    }
    counts
}

/// `root -> one node per non-empty phase -> sentence leaves`, numbered
/// breadth-first.
pub fn planted_tree(counts: &[usize]) -> SentenceTree {
    let groups: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let mut parents: Vec<usize> = vec![0; groups.len()];
    for (g, &c) in groups.iter().enumerate() {
        parents.extend(std::iter::repeat(g + 1).take(c));
    }
    SentenceTree::from_parents(parents).expect("phase tree is valid")
}

pub fn make_synthetic_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<RecipeSample>> {
    cfg.validate()?;
    let lexicon = ingredient_lexicon(cfg.vocab_size);
    let mut dish_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d15c);
    let dishes: Vec<Dish> = (0..cfg.dishes).map(|_| make_dish(&mut dish_rng, cfg, &lexicon)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.size());
    for index in 0..cfg.size() {
        let partition = if index < cfg.train {
            Partition::Train
        } else if index < cfg.train + cfg.val {
            Partition::Val
        } else {
            Partition::Test
        };
        let d = rng.gen_range(0..dishes.len());
        let dish = &dishes[d];
        let total = rng.gen_range(cfg.min_sentences..=cfg.max_sentences);
        let counts = phase_counts(&mut rng, total, cfg.phases, cfg.phase_pool);
        let mut instructions = Vec::with_capacity(total);
        for (p, &c) in counts.iter().enumerate() {
            let mut picked = rand::seq::index::sample(&mut rng, cfg.phase_pool, c).into_vec();
            picked.sort_unstable();
            instructions.extend(picked.into_iter().map(|k| dish.pools[p][k].clone()));
        }
        let key = StructureKey { dish: d, counts: counts.clone(), index };
        out.push(RecipeSample {
            id: format!("syn{index:05}"),
            title: dish.title.clone(),
            ingredients: dish.ingredients.clone(),
            instructions,
            partition,
            image_key: key.to_string(),
            planted_tree: Some(planted_tree(&counts)),
            parsed_tree: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_round_trips() {
        let k = StructureKey { dish: 7, counts: vec![2, 1, 3, 1], index: 42 };
        assert_eq!(k.to_string(), "d007-2131-00042");
        assert_eq!(k.to_string().parse::<StructureKey>().unwrap(), k);
        assert!("recipe-17".parse::<StructureKey>().is_err());
    }

    #[test]
    fn planted_tree_groups_by_phase() {
        let t = planted_tree(&[2, 0, 1]);
        assert_eq!(t.to_bracket().to_string(), "((s0 s1) (s2))");
        assert_eq!(t.leaf_count(), 3);
    }

    #[test]
    fn rejects_sentence_range_outside_limits() {
        let cfg = SyntheticConfig { max_sentences: 20, phase_pool: 9, ..Default::default() };
        assert!(matches!(make_synthetic_corpus(&cfg, 1), Err(SgnError::Config(_))));
        let cfg = SyntheticConfig { min_sentences: 0, ..Default::default() };
        assert!(matches!(make_synthetic_corpus(&cfg, 1), Err(SgnError::Config(_))));
    }

    #[test]
    fn counts_cover_every_phase_when_possible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for total in 1..=19 {
            let c = phase_counts(&mut rng, total, 4, 5);
            assert_eq!(c.iter().sum::<usize>(), total);
            assert!(c.iter().all(|&x| x <= 5));
            if total >= 4 {
                assert!(c.iter().all(|&x| x >= 1));
            }
        }
    }
}
