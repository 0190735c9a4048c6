pub mod liegroup;
pub mod platform;
pub mod hyperpinv;
pub mod nrsolver;
pub mod datagen;
pub mod gnn;
pub mod evalbench;
