// SPDX-License-Identifier: Apache-2.0
// Copyright The mudguard Authors

use crate::control::ControlConfig;
use crate::cpe_wlm::LocalMode;
use crate::net::Tick;
use crate::svm::SvmConfig;
use crate::wle::RouterConfig;
use serde::{Deserialize, Serialize};
use std::net::Ipv4Addr;

/// Run configuration. Every key is optional; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Overrides the scenario's seed when set.
    pub seed: Option<u64>,
    /// Run with the VNF (tap, pipeline, controller) attached.
    pub vnf_attached: bool,
    pub isp_resolver: Ipv4Addr,
    pub first_packet_capacity: usize,
    pub control: ControlConfig,
    pub router: RouterSettings,
    pub cpe: CpeSettings,
    pub svm: SvmConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: None,
            vnf_attached: true,
            isp_resolver: Ipv4Addr::new(100, 100, 100, 53),
            first_packet_capacity: 1 << 20,
            control: ControlConfig::default(),
            router: RouterSettings::default(),
            cpe: CpeSettings::default(),
            svm: SvmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSettings {
    /// Apply drop rules. Off leaves the router forwarding everything.
    pub enforce: bool,
    pub idle_expiry: Option<Tick>,
    pub bleach_dscp: bool,
}

impl Default for RouterSettings {
    fn default() -> Self {
        RouterSettings { enforce: true, idle_expiry: None, bleach_dscp: true }
    }
}

impl RouterSettings {
    pub fn router_config(&self) -> RouterConfig {
        RouterConfig { idle_expiry: self.idle_expiry, bleach_dscp: self.bleach_dscp }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpeSettings {
    pub mark_latency: Tick,
    pub wlm_mode: LocalMode,
}

impl Default for CpeSettings {
    fn default() -> Self {
        CpeSettings { mark_latency: 0, wlm_mode: LocalMode::Block }
    }
}
