// SPDX-License-Identifier: Apache-2.0
pub mod agents;
pub mod backend;
pub mod clustering;
pub mod model;
pub mod pipeline;
pub mod refinement;
pub mod remote;
pub mod scoring;
pub mod seed;
pub mod store;
pub mod synthetic;
