//! Model-free 3D shape control of deformable objects.
//!
//! The library builds a truncated modal feature space on an ellipsoidal base
//! mesh, computes low-dimensional deformation features from sampled surface
//! points, and drives an adaptive transpose-Jacobian controller against a
//! built-in quasi-static FEM plant. The `modalshape` binary exposes scenario
//! runs, sweeps, modal dumps, and mesh generation on the command line.

pub mod controller;
pub mod error;
pub mod features;
pub mod fem;
pub mod harness;
pub mod linalg;
pub mod mesh;
pub mod modal;
pub mod object_map;
pub mod plant;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
pub use features::{compute_features, feature_error, resample_polyline, FeatureVector, SamplingSet};
pub use fem::{assemble_system, AssembledSystem};
pub use mesh::{
    estimate_base_mesh_frame, generate_bar_mesh, generate_ellipsoid_mesh, EllipsoidSpec,
    MaterialParams, MeshResolution, SolidMesh,
};
pub use modal::{solve_modes, ModalBasis};
pub use object_map::{
    build_allocation, build_feature_projector, project_points, reassemble_on_sampling_change,
    AllocationMap, FeatureProjector, SurfaceProjection,
};
pub use plant::{ElasticityModel, Plant, PlantObservation};
pub use scenario::Scenario;
