//! Synthetic interaction logs with a planted next-item pattern.
//!
//! Every kernel draws the first item uniformly, then each next item from a
//! known transition law, so the best achievable top-1 accuracy is computable
//! from the spec alone (see [`SynthSpec::oracle_top1`]).
//!
//! * `markov`: each item gets `successors` fixed random follow-ups; with
//!   probability `follow` the next item is one of them, otherwise uniform.
//! * `cycle`: `i → i + 1`, wrapping at the last item.
//! * `uniform`: every step is uniform.
//! * `facets`: items form an `facet_a × facet_b` grid. The next item keeps
//!   the current `a` coordinate with probability `p_a` (else another `a`
//!   uniformly) and independently keeps `b` with probability `p_b`.

use rand::seq::index;
use rand::Rng as _;

use crate::config::KeyValues;
use crate::data::{Event, InteractionStore, UserHistory};
use crate::seed::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Markov { successors: usize, follow: f64 },
    Cycle,
    Uniform,
    Facets { a: usize, b: usize, p_a: f64, p_b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Real items; ids run `1..=items`.
    pub items: usize,
    pub users: usize,
    pub mean_len: usize,
    pub min_len: usize,
    /// Mean gap between consecutive events, seconds.
    pub gap: i64,
    pub seed: u64,
    pub kernel: Kernel,
}

impl SynthSpec {
    pub fn markov(items: usize, users: usize, mean_len: usize, seed: u64) -> Self {
        Self {
            items,
            users,
            mean_len,
            min_len: 3,
            gap: 3_600,
            seed,
            kernel: Kernel::Markov {
                successors: 3,
                follow: 0.9,
            },
        }
    }

    pub fn facets(a: usize, b: usize, users: usize, mean_len: usize, seed: u64) -> Self {
        Self {
            items: a * b,
            users,
            mean_len,
            min_len: 3,
            gap: 3_600,
            seed,
            kernel: Kernel::Facets {
                a,
                b,
                p_a: 0.8,
                p_b: 0.8,
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let kind = kv.take_str("kernel").unwrap_or_else(|| "markov".into());
        let kernel = match kind.as_str() {
            "markov" => Kernel::Markov {
                successors: kv.take_or("successors", 3)?,
                follow: kv.take_or("follow", 0.9)?,
            },
            "cycle" => Kernel::Cycle,
            "uniform" => Kernel::Uniform,
            "facets" => Kernel::Facets {
                a: kv.take_or("facet_a", 8)?,
                b: kv.take_or("facet_b", 8)?,
                p_a: kv.take_or("p_a", 0.8)?,
                p_b: kv.take_or("p_b", 0.8)?,
            },
            other => return Err(Error::config(format!("unknown kernel `{other}`"))),
        };
        let items = match kernel {
            Kernel::Facets { a, b, .. } => {
                let items = kv.take_or("items", a * b)?;
                if items != a * b {
                    return Err(Error::config("facet kernels need items = facet_a × facet_b"));
                }
                items
            }
            _ => kv.take_or("items", 500)?,
        };
        let spec = Self {
            items,
            users: kv.take_or("users", 2_000)?,
            mean_len: kv.take_or("mean_len", 20)?,
            min_len: kv.take_or("min_len", 3)?,
            gap: kv.take_or("gap", 3_600)?,
            seed: kv.take_or("seed", 0)?,
            kernel,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items < 3 || self.users == 0 {
            return Err(Error::config("need at least 3 items and 1 user"));
        }
        if self.min_len < 3 || self.mean_len < self.min_len {
            return Err(Error::config("need 3 ≤ min_len ≤ mean_len"));
        }
        if self.gap < 1 {
            return Err(Error::config("gap must be positive"));
        }
        match self.kernel {
            Kernel::Markov { successors, follow } => {
                if successors == 0 || successors > self.items || !(0.0..=1.0).contains(&follow) {
                    return Err(Error::config("markov kernel needs 1 ≤ successors ≤ items and follow in [0,1]"));
                }
            }
            Kernel::Facets { a, b, p_a, p_b } => {
                if a < 2 || b < 2 || !(0.0..=1.0).contains(&p_a) || !(0.0..=1.0).contains(&p_b) {
                    return Err(Error::config("facet kernel needs two or more values per facet and p in [0,1]"));
                }
            }
            Kernel::Cycle | Kernel::Uniform => {}
        }
        Ok(())
    }

    /// Probability that the single most likely next item is the real one.
    pub fn oracle_top1(&self) -> f64 {
        let n = self.items as f64;
        match self.kernel {
            Kernel::Markov { successors, follow } => {
                (follow / successors as f64 + (1.0 - follow) / n).max(1.0 / n)
            }
            Kernel::Cycle => 1.0,
            Kernel::Uniform => 1.0 / n,
            Kernel::Facets { a, b, p_a, p_b } => {
                let best = |p: f64, k: usize| p.max((1.0 - p) / (k - 1) as f64);
                best(p_a, a) * best(p_b, b)
            }
        }
    }

    pub fn generate(&self) -> Result<InteractionStore> {
        self.validate()?;
        let mut kernel_rng = seed::rng(self.seed, seed::STREAM_SYNTH, 0);
        let successors: Vec<Vec<usize>> = match self.kernel {
            Kernel::Markov { successors, .. } => (0..=self.items)
                .map(|_| {
                    index::sample(&mut kernel_rng, self.items, successors)
                        .into_iter()
                        .map(|i| i + 1)
                        .collect()
                })
                .collect(),
            _ => Vec::new(),
        };

        let max_len = 2 * self.mean_len - self.min_len;
        let users = (0..self.users)
            .map(|u| {
                let mut rng = seed::rng(self.seed, seed::STREAM_SYNTH, 1 + u as u64);
                let len = rng.random_range(self.min_len..=max_len);
                let mut ts: i64 = 1_600_000_000 + rng.random_range(0..86_400 * 365);
                let mut item = rng.random_range(1..=self.items);
                let mut events = Vec::with_capacity(len);
                for _ in 0..len {
                    events.push(Event { item, ts });
                    ts += rng.random_range(1..=2 * self.gap);
                    item = self.step(&mut rng, item, &successors);
                }
                UserHistory {
                    user: u as u64 + 1,
                    events,
                }
            })
            .collect();
        Ok(InteractionStore {
            num_items: self.items + 1,
            raw_items: (0..=self.items as u64).collect(),
            users,
        })
    }

    fn step(&self, rng: &mut Rng, item: usize, successors: &[Vec<usize>]) -> usize {
        match self.kernel {
            Kernel::Markov { follow, .. } => {
                if rng.random_bool(follow) {
                    let s = &successors[item];
                    s[rng.random_range(0..s.len())]
                } else {
                    rng.random_range(1..=self.items)
                }
            }
            Kernel::Cycle => item % self.items + 1,
            Kernel::Uniform => rng.random_range(1..=self.items),
            Kernel::Facets { a, b, p_a, p_b } => {
                let (fa, fb) = ((item - 1) / b, (item - 1) % b);
                let mut next = |cur: usize, k: usize, p: f64| {
                    if rng.random_bool(p) {
                        cur
                    } else {
                        let other = rng.random_range(0..k - 1);
                        if other >= cur {
                            other + 1
                        } else {
                            other
                        }
                    }
                };
                let na = next(fa, a, p_a);
                let nb = next(fb, b, p_b);
                1 + na * b + nb
            }
        }
    }
}
