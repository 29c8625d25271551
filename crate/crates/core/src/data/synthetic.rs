use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{render_interactions, InteractionDataset, ItemVocab};
use crate::error::{Error, Result};

/// Parameters of the seeded multi-domain generator.
///
/// Items live in a global pool with shared latent factors; each domain draws
/// its catalog from the pool, so catalogs overlap and preferences learned in
/// one domain carry over to another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub users_per_domain: usize,
    pub items_per_domain: usize,
    pub item_pool: usize,
    pub avg_len: f64,
    pub latent_dim: usize,
    /// Scale of both the per-domain item perturbation and the Gumbel noise on
    /// each choice. Zero makes every choice a deterministic argmax.
    pub noise: f64,
    /// Weight of the previous item's similarity in each next-item choice.
    #[serde(default = "default_transition")]
    pub transition: f64,
    pub seed: u64,
}

fn default_transition() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn max_len(&self) -> usize {
        (2.0 * self.avg_len).round() as usize - 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_domains", self.num_domains),
            ("users_per_domain", self.users_per_domain),
            ("items_per_domain", self.items_per_domain),
            ("item_pool", self.item_pool),
            ("latent_dim", self.latent_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.num_domains < 2 {
            return Err(Error::config("num_domains", format!("needs at least 2 domains, got {}", self.num_domains)));
        }
        if !(self.avg_len >= 3.0) || !self.avg_len.is_finite() {
            return Err(Error::config("avg_len", format!("must be at least 3, got {}", self.avg_len)));
        }
        if self.items_per_domain > self.item_pool {
            return Err(Error::config("items_per_domain", "exceeds item_pool"));
        }
        if self.max_len() > self.items_per_domain {
            return Err(Error::config(
                "items_per_domain",
                format!("must cover the longest sequence ({})", self.max_len()),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        if !self.transition.is_finite() {
            return Err(Error::config("transition", "must be finite"));
        }
        Ok(())
    }
}

/// One generated domain together with the latent factors that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticDomain {
    pub dataset: InteractionDataset,
    /// Pool index of each domain item, indexed by dataset item id.
    pub pool_items: Vec<usize>,
    /// Per-user preference vectors, indexed by dataset user id.
    pub user_factors: Vec<Vec<f64>>,
    /// Perturbed item vectors of the domain catalog, indexed by catalog slot.
    pub catalog_factors: Vec<Vec<f64>>,
    /// Pool index of each catalog slot.
    pub catalog: Vec<usize>,
}

impl SyntheticDomain {
    /// Static preference score of a user for a catalog slot.
    pub fn preference(&self, user: usize, slot: usize) -> f64 {
        dot(&self.user_factors[user], &self.catalog_factors[slot])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticDomain>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent_dim;
    let item_std = 1.0 / (k as f64).sqrt();
    let pool: Vec<Vec<f64>> = (0..spec.item_pool).map(|_| normal_vec(&mut rng, k, item_std)).collect();
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let transition_scale = spec.transition * (k as f64).sqrt();
    let (min_len, max_len) = (3, spec.max_len());

    let mut domains = Vec::with_capacity(spec.num_domains);
    for d in 0..spec.num_domains {
        let mut catalog = sample(&mut rng, spec.item_pool, spec.items_per_domain).into_vec();
        catalog.sort_unstable();
        let catalog_factors: Vec<Vec<f64>> = catalog
            .iter()
            .map(|&p| {
                let delta = normal_vec(&mut rng, k, item_std);
                pool[p].iter().zip(delta).map(|(v, e)| v + spec.noise * e).collect()
            })
            .collect();

        let mut user_factors = Vec::with_capacity(spec.users_per_domain);
        let mut histories = Vec::with_capacity(spec.users_per_domain);
        let mut consumed = vec![false; catalog.len()];
        for n in 0..spec.users_per_domain {
            let user = normal_vec(&mut rng, k, 1.0);
            let len = rng.random_range(min_len..=max_len);
            let base: Vec<f64> = catalog_factors.iter().map(|v| dot(&user, v)).collect();
            consumed.iter_mut().for_each(|c| *c = false);
            let mut prev: Option<usize> = None;
            let mut history = Vec::with_capacity(len);
            for step in 0..len {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (slot, &pref) in base.iter().enumerate() {
                    // Draw for every slot so the stream does not depend on
                    // which items were already consumed.
                    let g: f64 = if spec.noise > 0.0 { gumbel.sample(&mut rng) } else { 0.0 };
                    if consumed[slot] {
                        continue;
                    }
                    let trans = prev.map_or(0.0, |p| transition_scale * dot(&catalog_factors[p], &catalog_factors[slot]));
                    let score = pref + trans + spec.noise * g;
                    if score > best.0 {
                        best = (score, slot);
                    }
                }
                let slot = best.1;
                consumed[slot] = true;
                prev = Some(slot);
                history.push((format!("i{}", catalog[slot]), step as i64 + 1));
            }
            user_factors.push(user);
            histories.push((format!("d{d}u{n}"), history));
        }
        let dataset = InteractionDataset::from_histories(&format!("domain_{d}"), histories, ItemVocab::new())?;
        let pool_items = (0..dataset.num_items())
            .map(|i| dataset.vocab().name(i)[1..].parse().expect("generated item name"))
            .collect();
        domains.push(SyntheticDomain {
            dataset,
            pool_items,
            user_factors,
            catalog_factors,
            catalog,
        });
    }
    Ok(domains)
}

/// Generates the domains and writes `domain_{d}.tsv` files into `dir`. The
/// last domain is the conventional target domain.
pub fn write_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for domain in generate_synthetic(spec)? {
        let path = dir.join(format!("{}.tsv", domain.dataset.domain));
        fs::write(&path, render_interactions(&domain.dataset)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_domains: 2,
            users_per_domain: 60,
            items_per_domain: 40,
            item_pool: 60,
            avg_len: 8.0,
            latent_dim: 6,
            noise,
            transition: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = write_synthetic(&spec(0.5), a.path()).unwrap();
        let pb = write_synthetic(&spec(0.5), b.path()).unwrap();
        assert_eq!(pa.len(), 2);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let mut other = spec(0.5);
        other.seed = 12;
        let c = tempfile::tempdir().unwrap();
        let pc = write_synthetic(&other, c.path()).unwrap();
        assert_ne!(fs::read(&pa[0]).unwrap(), fs::read(&pc[0]).unwrap());
    }

    #[test]
    fn noiseless_users_consume_their_top_item() {
        for domain in generate_synthetic(&spec(0.0)).unwrap() {
            for user in 0..domain.dataset.num_users() {
                // Brute force over the latent preference scores.
                let top_slot = (0..domain.catalog.len())
                    .max_by(|&a, &b| domain.preference(user, a).total_cmp(&domain.preference(user, b)))
                    .unwrap();
                let top_name = format!("i{}", domain.catalog[top_slot]);
                let seq = domain.dataset.sequence(user);
                assert!(seq.iter().any(|&i| domain.dataset.vocab().name(i) == top_name));
            }
        }
    }

    #[test]
    fn single_domain_is_rejected() {
        let mut s = spec(0.1);
        s.num_domains = 1;
        match generate_synthetic(&s) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "num_domains"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn average_length_near_target() {
        let mut s = spec(0.3);
        s.users_per_domain = 400;
        for domain in generate_synthetic(&s).unwrap() {
            let ds = &domain.dataset;
            let avg = ds.num_interactions() as f64 / ds.num_users() as f64;
            assert!((avg - s.avg_len).abs() <= 0.2 * s.avg_len, "avg {avg}");
            assert!(ds.sequences().iter().all(|q| q.len() >= 3 && q.len() <= s.max_len()));
        }
    }

    #[test]
    fn catalogs_overlap_through_the_pool() {
        let domains = generate_synthetic(&spec(0.2)).unwrap();
        let shared = domains[0].catalog.iter().filter(|p| domains[1].catalog.contains(p)).count();
        assert!(shared > 0);
        for dom in &domains {
            for (id, &p) in dom.pool_items.iter().enumerate() {
                assert_eq!(dom.dataset.vocab().name(id), format!("i{p}"));
            }
        }
    }
}
