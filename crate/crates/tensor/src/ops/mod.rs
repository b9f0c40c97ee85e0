pub(crate) mod broadcast;
pub(crate) mod conv;
pub(crate) mod norm;
pub(crate) mod reduce;
pub(crate) mod sample;
pub(crate) mod shape;
