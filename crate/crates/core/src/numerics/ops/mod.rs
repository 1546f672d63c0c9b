pub mod activation;
pub mod attention;
pub mod conv;
pub mod linalg;
pub mod norm;
pub mod resize;
pub mod shape;
pub mod softmax;

pub use activation::activation;
pub use attention::{attention_core, attention_core_vjp, multi_head_attention};
pub use conv::{conv2d, conv_transpose2d};
pub use linalg::{linear, matmul};
pub use norm::layer_norm;
pub use resize::bilinear_resize;
pub use shape::{map_to_sequence, sequence_to_map};
pub use softmax::softmax;
