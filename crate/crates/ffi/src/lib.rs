pub use naptune;
