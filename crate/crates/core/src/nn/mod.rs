pub mod optim;
pub mod tape;
