use rand::Rng;

use crate::tensor::Tensor;

/// Replay buffer of generated images for discriminator updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImagePool {
    pub capacity: usize,
    pub images: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    /// Stores `image` and returns what the discriminator should see: the
    /// new image while filling up, afterwards a coin flip between the new
    /// image and a stored one (which is then replaced).
    pub fn query(&mut self, image: Tensor, rng: &mut impl Rng) -> Tensor {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if rng.gen_bool(0.5) {
            let i = rng.gen_range(0..self.capacity);
            std::mem::replace(&mut self.images[i], image)
        } else {
            image
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fills_then_mixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = ImagePool::new(3);
        for i in 0..3 {
            let t = Tensor::full(&[1], i as f32);
            assert_eq!(pool.query(t.clone(), &mut rng), t);
        }
        let mut old = 0;
        for i in 3..100 {
            let out = pool.query(Tensor::full(&[1], i as f32), &mut rng);
            if out.data()[0] != i as f32 {
                old += 1;
            }
        }
        assert_eq!(pool.images.len(), 3);
        assert!(old > 20 && old < 80);
    }

    #[test]
    fn zero_capacity_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = ImagePool::new(0);
        let t = Tensor::full(&[2], 1.0);
        assert_eq!(pool.query(t.clone(), &mut rng), t);
        assert!(pool.images.is_empty());
    }
}
