pub mod corpus;
pub mod evaluation;
pub mod experiment;
pub mod hier_model;
pub mod lang_tree;
pub mod numerics;
pub mod seed;
pub mod training;
pub mod transformer;
