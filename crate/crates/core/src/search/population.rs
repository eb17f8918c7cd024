use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::program::SourceProgram;

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub id: String,
    pub program: SourceProgram,
    pub score: f64,
    pub latency: f64,
    /// Insertion ordinal; the seed member is 0.
    pub inserted: u64,
}

/// Bounded elitist population.
#[derive(Debug, Clone)]
pub struct Population {
    members: Vec<Member>,
    capacity: usize,
    next_insert: u64,
}

impl Population {
    pub fn new(seed_member: Member, capacity: usize) -> Self {
        Self {
            members: vec![seed_member],
            capacity: capacity.max(1),
            next_insert: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.iter().any(|m| m.id == id)
    }

    /// Score descending, then latency ascending, then earlier insertion.
    pub fn ranked(&self) -> Vec<&Member> {
        let mut v: Vec<&Member> = self.members.iter().collect();
        v.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.latency.total_cmp(&b.latency))
                .then(a.inserted.cmp(&b.inserted))
        });
        v
    }

    pub fn best(&self) -> &Member {
        self.ranked()[0]
    }

    /// Uniform draw among the `top_k` best, deterministic in
    /// `(seed, iteration)`.
    pub fn select_parent(&self, seed: u64, iteration: u64, top_k: usize) -> &Member {
        let ranked = self.ranked();
        let k = top_k.clamp(1, ranked.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iteration);
        ranked[rng.gen_range(0..k)]
    }

    /// Appends below capacity; at capacity replaces the worst member only if
    /// the newcomer scores strictly higher. Zero scores and ids already
    /// present are never inserted.
    pub fn insert(&mut self, id: String, program: SourceProgram, score: f64, latency: f64) -> bool {
        if !(score > 0.0) || self.contains(&id) {
            return false;
        }
        let member = Member {
            id,
            program,
            score,
            latency,
            inserted: self.next_insert,
        };
        if self.members.len() < self.capacity {
            self.members.push(member);
        } else {
            let worst = self.ranked().last().map(|m| m.id.clone()).expect("population is non-empty");
            let slot = self.members.iter().position(|m| m.id == worst).unwrap();
            if score <= self.members[slot].score {
                return false;
            }
            self.members[slot] = member;
        }
        self.next_insert += 1;
        true
    }
}
