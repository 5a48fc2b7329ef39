use crate::diffcore::Tensor;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
    /// Frozen parameters enter the tape as constants and never receive
    /// gradient.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let grad = Tensor::zeros(tensor.shape());
        Self {
            name: name.into(),
            tensor,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}
