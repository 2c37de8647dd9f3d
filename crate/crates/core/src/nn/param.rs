use super::Scalar;

/// First and second moment estimates kept by Adam for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self { first: vec![T::zero(); n], second: vec![T::zero(); n] }
    }
}

/// A learnable tensor with its accumulated gradient and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub moments: Moments<T>,
}

impl<T: Scalar> Param<T> {
    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![value; n],
            grad: vec![T::zero(); n],
            moments: Moments::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn accumulate(&mut self, grad: &[T]) {
        self.grad.iter_mut().zip(grad).for_each(|(a, &b)| *a += b);
    }
}
