//! Analytics for the service monitoring stack: the MEASURE language, the
//! lognormal overload-risk monitor, path tomography and the Datalog query
//! engine.

pub mod measure;
pub mod ratemon;
pub mod pathmon;
pub mod query;
