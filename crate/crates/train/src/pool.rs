//! History buffer of generated samples for discriminator updates.

use std::collections::HashMap;

use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

pub struct ImagePool {
    capacity: usize,
    items: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Store `item` (detached) and return what the discriminator should see:
    /// the item itself while the pool fills up; once full, with probability
    /// ½ a random stored sample that `item` replaces, otherwise `item`.
    pub fn query<R: Rng>(&mut self, item: &Tensor, rng: &mut R) -> Tensor {
        let item = item.detach();
        if self.capacity == 0 {
            return item;
        }
        if self.items.len() < self.capacity {
            self.items.push(item.clone());
            return item;
        }
        if rng.random::<f64>() < 0.5 {
            let i = rng.random_range(0..self.items.len());
            std::mem::replace(&mut self.items[i], item)
        } else {
            item
        }
    }

    pub fn state(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("{prefix}.{i:04}"), t.clone()))
            .collect()
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let mut items = Vec::new();
        while let Some(t) = tensors.get(&format!("{prefix}.{:04}", items.len())) {
            items.push(t.clone());
        }
        if items.len() > self.capacity {
            return Err(Error::Checkpoint(format!(
                "pool '{prefix}' holds {} items, capacity is {}",
                items.len(),
                self.capacity
            )));
        }
        self.items = items;
        Ok(())
    }
}
