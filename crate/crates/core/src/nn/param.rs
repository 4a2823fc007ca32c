use ndarray::Array2;

/// A trainable tensor with its gradient accumulator. Every parameter is
/// stored as a matrix; biases are `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    fn set_trainable(&mut self, pred: &dyn Fn(&str) -> bool) {
        for (name, p) in self.params_mut() {
            p.trainable = pred(&name);
        }
    }
}
