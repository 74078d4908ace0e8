// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

pub mod mud;
pub mod net;
pub mod dns;
pub mod pipeline;
pub mod cpe_wlm;
pub mod cpe;
pub mod wle;
pub mod control;
pub mod svm;
pub mod harness;
