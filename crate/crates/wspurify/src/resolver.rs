//! Regex-driven tensor address table.

use regex::Regex;
use serde::{Deserialize, Serialize};

use wspurify_core::{AddressResolver, Role, TensorAddress};

/// One row of the address table as written in a config file.
///
/// The pattern may capture `layer` (a decimal index) and `role` (a role
/// name). A fixed `role` takes precedence over the capture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddressRule {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("address rule `{pattern}`: {source}")]
    Regex { pattern: String, source: regex::Error },
    #[error("address rule `{0}` neither fixes a role nor captures one")]
    NoRole(String),
}

#[derive(Debug, Clone)]
struct Compiled {
    re: Regex,
    role: Option<Role>,
}

/// First matching rule wins; no match resolves to role `other`, no layer.
#[derive(Debug, Clone)]
pub struct RegexResolver {
    rules: Vec<Compiled>,
}

fn builtin_rules() -> Vec<AddressRule> {
    let roles: Vec<&str> = Role::ALL.iter().map(|r| r.as_str()).collect();
    let rule = |p: String, role: Option<Role>| AddressRule { pattern: p, role };
    let layered = r"^(?:.*\.)?layers\.(?P<layer>\d+)\.";
    let suffix = r"\.(?:weight|bias)$";
    let mut v = vec![
        rule(format!(r"^layer\.(?P<layer>\d+)\.(?P<role>{})$", roles.join("|")), None),
        rule("^head$".into(), Some(Role::Head)),
        // A second `layers` segment is ambiguous; treat the name as unknown.
        rule(r"(?:^|\.)layers\..*\.layers\.".into(), Some(Role::Other)),
    ];
    for (proj, role) in [("q", Role::AttnQ), ("k", Role::AttnK), ("v", Role::AttnV), ("o", Role::AttnO)] {
        v.push(rule(format!(r"{layered}self_attn\.{proj}_proj{suffix}"), Some(role)));
    }
    for (proj, role) in [("up", Role::MlpUp), ("gate", Role::MlpGate), ("down", Role::MlpDown)] {
        v.push(rule(format!(r"{layered}mlp\.{proj}_proj{suffix}"), Some(role)));
    }
    v.push(rule(format!(r"{layered}[^.]*norm[^.]*{suffix}"), Some(Role::Norm)));
    // Anything else under `layers` stays unknown rather than hitting the stem rules.
    v.push(rule(r"(?:^|\.)layers\.".into(), Some(Role::Other)));
    v.push(rule(format!(r"^(?:.*\.)?embed_tokens{suffix}"), Some(Role::Embedding)));
    v.push(rule(format!(r"^(?:.*\.)?lm_head{suffix}"), Some(Role::Head)));
    v.push(rule(format!(r"^(?:.*\.)?[^.]*norm[^.]*{suffix}"), Some(Role::Norm)));
    v
}

impl RegexResolver {
    /// The built-in table: `layer.{l}.{role}`, `head`, and the common
    /// `...layers.{l}.self_attn.{q,k,v,o}_proj` / `mlp.{up,gate,down}_proj`
    /// transformer scheme.
    pub fn builtin() -> Self {
        Self::with_rules(&[]).expect("built-in rules compile")
    }

    /// `user` rules are tried before the built-in ones.
    pub fn with_rules(user: &[AddressRule]) -> Result<Self, RuleError> {
        let rules = user
            .iter()
            .cloned()
            .chain(builtin_rules())
            .map(|r| {
                let re = Regex::new(&r.pattern).map_err(|source| RuleError::Regex { pattern: r.pattern.clone(), source })?;
                if r.role.is_none() && !re.capture_names().any(|n| n == Some("role")) {
                    return Err(RuleError::NoRole(r.pattern));
                }
                Ok(Compiled { re, role: r.role })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rules })
    }
}

impl Default for RegexResolver {
    fn default() -> Self {
        Self::builtin()
    }
}

impl AddressResolver for RegexResolver {
    fn resolve(&self, name: &str) -> TensorAddress {
        for rule in &self.rules {
            let Some(caps) = rule.re.captures(name) else { continue };
            let role = match rule.role {
                Some(r) => Some(r),
                None => caps.name("role").and_then(|m| Role::parse(m.as_str())),
            };
            let layer = match caps.name("layer") {
                Some(m) => match m.as_str().parse::<usize>() {
                    Ok(l) => Some(l),
                    // Index out of range: the rule does not apply.
                    Err(_) => continue,
                },
                None => None,
            };
            let Some(role) = role else { continue };
            return TensorAddress::new(layer, role);
        }
        TensorAddress::UNKNOWN
    }
}
