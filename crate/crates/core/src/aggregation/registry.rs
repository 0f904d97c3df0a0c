use std::collections::BTreeMap;

use super::{
    AggregationError, AggregationStrategy, FedAvg, FloraStacking, SelectiveStacking, ZeroPadding,
};

type Constructor = fn() -> Box<dyn AggregationStrategy>;

/// Name-keyed table of aggregation strategies.
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, Constructor>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry holding the four built-in rules.
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("selective_stacking", || Box::new(SelectiveStacking));
        r.register("zero_padding", || Box::new(ZeroPadding));
        r.register("fedavg", || Box::new(FedAvg));
        r.register("flora_stacking", || Box::new(FloraStacking));
        r
    }

    /// Adds or replaces a strategy under `name`.
    pub fn register(&mut self, name: &'static str, ctor: Constructor) {
        self.entries.insert(name, ctor);
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn AggregationStrategy>, AggregationError> {
        self.entries
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| AggregationError::UnknownStrategy(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}
