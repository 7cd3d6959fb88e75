//! Checkpoints and knowledge transfer between tasks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::applicability::{ClassifierNet, ClassifierSource, KnowledgeSource};
use crate::error::{Error, Result};
use crate::gridworld::{action_names, Action, EnvSpec};
use crate::nn::{LayerParams, LayerSpec, Network, Tensor};
use crate::policy::PolicyNet;
use crate::trainer::Expert;

pub const FORMAT_HEADER: &str = "MASKRL-CKPT v1";
const HEADER_PREFIX: &str = "MASKRL-CKPT ";
const SPEC_END: &str = "--- end of spec ---\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Policy,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub kind: NetworkKind,
    pub task: String,
    pub env_steps: u64,
    /// Action names in network output (policy) or one-hot (classifier) order.
    pub actions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointNets {
    Policy(PolicyNet),
    Classifier(ClassifierNet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub nets: CheckpointNets,
}

impl Checkpoint {
    pub fn policy(net: PolicyNet, task: &str, env_steps: u64, actions: Vec<String>) -> Result<Self> {
        if actions.len() != net.num_actions() {
            return Err(Error::Architecture("policy action names do not match its head".into()));
        }
        Ok(Self {
            meta: CheckpointMeta {
                kind: NetworkKind::Policy,
                task: task.to_string(),
                env_steps,
                actions,
            },
            nets: CheckpointNets::Policy(net),
        })
    }

    pub fn classifier(net: ClassifierNet, task: &str, env_steps: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                kind: NetworkKind::Classifier,
                task: task.to_string(),
                env_steps,
                actions: net.actions.clone(),
            },
            nets: CheckpointNets::Classifier(net),
        }
    }

    fn networks(&self) -> Vec<(&'static str, &Network)> {
        match &self.nets {
            CheckpointNets::Policy(p) => vec![
                ("extractor", &p.extractor),
                ("policy_head", &p.policy_head),
                ("value_head", &p.value_head),
            ],
            CheckpointNets::Classifier(c) => vec![("extractor", &c.extractor), ("head", &c.head)],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecBlock {
    kind: NetworkKind,
    task: String,
    env_steps: u64,
    actions: Vec<String>,
    payload_bytes: u64,
    networks: Vec<NetBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetBlock {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorBlock {
    layer: usize,
    role: String,
    shape: Vec<usize>,
}

const ROLES: [&str; 4] = ["weight", "bias", "running_mean", "running_var"];

fn layer_tensors(p: &LayerParams) -> Vec<(&'static str, &Tensor)> {
    [&p.weight, &p.bias, &p.running_mean, &p.running_var]
        .into_iter()
        .zip(ROLES)
        .filter_map(|(t, role)| t.as_ref().map(|t| (role, t)))
        .collect()
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut blocks = Vec::new();
    for (name, net) in ckpt.networks() {
        let mut tensors = Vec::new();
        for (i, p) in net.params().iter().enumerate() {
            for (role, t) in layer_tensors(p) {
                tensors.push(TensorBlock {
                    layer: i,
                    role: role.to_string(),
                    shape: t.shape().to_vec(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        blocks.push(NetBlock {
            name: name.to_string(),
            input_shape: net.input_shape().to_vec(),
            layers: net.specs().to_vec(),
            tensors,
        });
    }
    let spec = SpecBlock {
        kind: ckpt.meta.kind,
        task: ckpt.meta.task.clone(),
        env_steps: ckpt.meta.env_steps,
        actions: ckpt.meta.actions.clone(),
        payload_bytes: payload.len() as u64,
        networks: blocks,
    };
    let text = toml::to_string(&spec).map_err(|e| Error::CheckpointMalformed(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + text.len() + 64);
    out.extend_from_slice(FORMAT_HEADER.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(text.as_bytes());
    if !text.ends_with('\n') {
        out.push(b'\n');
    }
    out.extend_from_slice(SPEC_END.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
        return if FORMAT_HEADER.as_bytes().starts_with(bytes) {
            Err(Error::CheckpointTruncated("file ends inside the header line".into()))
        } else {
            Err(Error::CheckpointMalformed("missing header line".into()))
        };
    };
    let header =
        std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::CheckpointMalformed("header is not UTF-8".into()))?;
    if header != FORMAT_HEADER {
        if let Some(version) = header.strip_prefix(HEADER_PREFIX) {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_HEADER.into(),
                found: format!("{HEADER_PREFIX}{version}"),
            });
        }
        return Err(Error::CheckpointMalformed(format!("unrecognized header `{header}`")));
    }
    let rest = &bytes[nl + 1..];
    let end = find(rest, SPEC_END.as_bytes())
        .ok_or_else(|| Error::CheckpointTruncated("spec block is not terminated".into()))?;
    let text =
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::CheckpointMalformed("spec block is not UTF-8".into()))?;
    let spec: SpecBlock = toml::from_str(text).map_err(|e| Error::CheckpointMalformed(e.to_string()))?;
    let payload = &rest[end + SPEC_END.len()..];
    let mut declared = 0u64;
    for b in &spec.networks {
        for t in &b.tensors {
            declared += 4 * t.shape.iter().product::<usize>() as u64;
        }
    }
    if declared != spec.payload_bytes {
        return Err(Error::CheckpointShape(format!(
            "tensor shapes need {declared} bytes but the spec declares {}",
            spec.payload_bytes
        )));
    }
    if (payload.len() as u64) < declared {
        return Err(Error::CheckpointTruncated(format!(
            "payload has {} of {declared} bytes",
            payload.len()
        )));
    }
    if payload.len() as u64 > declared {
        return Err(Error::CheckpointMalformed(format!(
            "{} trailing bytes after the payload",
            payload.len() as u64 - declared
        )));
    }
    let mut offset = 0usize;
    let mut nets = Vec::new();
    for block in &spec.networks {
        nets.push((block.name.as_str(), read_network(block, payload, &mut offset)?));
    }
    let take = |name: &str, nets: &mut Vec<(&str, Network)>| -> Result<Network> {
        let i = nets
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::CheckpointMalformed(format!("missing network `{name}`")))?;
        Ok(nets.remove(i).1)
    };
    let parts = match spec.kind {
        NetworkKind::Policy => {
            let extractor = take("extractor", &mut nets)?;
            let policy_head = take("policy_head", &mut nets)?;
            let value_head = take("value_head", &mut nets)?;
            CheckpointNets::Policy(
                PolicyNet::from_parts(extractor, policy_head, value_head)
                    .map_err(|e| Error::CheckpointShape(e.to_string()))?,
            )
        }
        NetworkKind::Classifier => {
            let extractor = take("extractor", &mut nets)?;
            let head = take("head", &mut nets)?;
            CheckpointNets::Classifier(
                ClassifierNet::from_parts(extractor, head, spec.actions.clone())
                    .map_err(|e| Error::CheckpointShape(e.to_string()))?,
            )
        }
    };
    if let CheckpointNets::Policy(p) = &parts {
        if p.num_actions() != spec.actions.len() {
            return Err(Error::CheckpointShape(format!(
                "policy head has {} outputs for {} actions",
                p.num_actions(),
                spec.actions.len()
            )));
        }
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            kind: spec.kind,
            task: spec.task,
            env_steps: spec.env_steps,
            actions: spec.actions,
        },
        nets: parts,
    })
}

fn read_network(block: &NetBlock, payload: &[u8], offset: &mut usize) -> Result<Network> {
    let template = Network::<f32>::xavier(block.layers.clone(), &block.input_shape, 0)
        .map_err(|e| Error::CheckpointShape(format!("network `{}`: {e}", block.name)))?;
    let mut params: Vec<LayerParams> = template
        .params()
        .iter()
        .map(|_| LayerParams {
            weight: None,
            bias: None,
            running_mean: None,
            running_var: None,
        })
        .collect();
    let mut expected = Vec::new();
    for (i, p) in template.params().iter().enumerate() {
        for (role, t) in layer_tensors(p) {
            expected.push((i, role, t.shape().to_vec()));
        }
    }
    let found: Vec<(usize, &str, Vec<usize>)> = block
        .tensors
        .iter()
        .map(|t| (t.layer, t.role.as_str(), t.shape.clone()))
        .collect();
    if expected != found {
        return Err(Error::CheckpointShape(format!(
            "network `{}` declares tensors {found:?}, its layers need {expected:?}",
            block.name
        )));
    }
    for t in &block.tensors {
        let len: usize = t.shape.iter().product();
        let bytes = &payload[*offset..*offset + 4 * len];
        *offset += 4 * len;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data)?;
        let slot = &mut params[t.layer];
        match t.role.as_str() {
            "weight" => slot.weight = Some(tensor),
            "bias" => slot.bias = Some(tensor),
            "running_mean" => slot.running_mean = Some(tensor),
            _ => slot.running_var = Some(tensor),
        }
    }
    Network::from_parts(block.layers.clone(), &block.input_shape, params)
        .map_err(|e| Error::CheckpointShape(format!("network `{}`: {e}", block.name)))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn mismatch(meta: &CheckpointMeta, target: &[Action]) -> Error {
    Error::ActionSetMismatch {
        source_actions: meta.actions.clone(),
        target_actions: action_names(target),
    }
}

/// The checkpoint's classifier, which must cover exactly `target` in order.
pub fn classifier_for_task(ckpt: &Checkpoint, target: &[Action]) -> Result<ClassifierNet> {
    let CheckpointNets::Classifier(net) = &ckpt.nets else {
        return Err(Error::Architecture(
            "checkpoint holds a policy, not a classifier".into(),
        ));
    };
    if ckpt.meta.actions != action_names(target) {
        return Err(mismatch(&ckpt.meta, target));
    }
    Ok(net.clone())
}

/// Appends zero-weighted one-hot inputs for `extra` new actions.
fn widen_classifier(net: &ClassifierNet, extra: &[String]) -> Result<ClassifierNet> {
    if extra.is_empty() {
        return Ok(net.clone());
    }
    let k = extra.len();
    let old_width = net.head.input_shape()[0];
    let width = old_width + k;
    let mut specs = net.head.specs().to_vec();
    let mut params = net.head.params().to_vec();
    match specs.as_mut_slice() {
        [LayerSpec::BatchNorm { features }, LayerSpec::Dense { inputs, .. }, ..] => {
            *features = width;
            *inputs = width;
        }
        _ => {
            return Err(Error::Architecture(
                "classifier head must start with BatchNorm then Dense".into(),
            ))
        }
    }
    let grow = |t: &Option<Tensor>, fill: f32| -> Result<Option<Tensor>> {
        let t = t
            .as_ref()
            .ok_or_else(|| Error::Architecture("batchnorm tensor missing".into()))?;
        let mut data = t.data().to_vec();
        data.resize(width, fill);
        Ok(Some(Tensor::new(vec![width], data)?))
    };
    let bn = &params[0];
    params[0] = LayerParams {
        weight: grow(&bn.weight, 1.0)?,
        bias: grow(&bn.bias, 0.0)?,
        running_mean: grow(&bn.running_mean, 0.0)?,
        running_var: grow(&bn.running_var, 1.0)?,
    };
    let w = params[1]
        .weight
        .as_ref()
        .ok_or_else(|| Error::Architecture("dense weight missing".into()))?;
    let outputs = w.shape()[0];
    let mut data = Vec::with_capacity(outputs * width);
    for row in w.data().chunks(old_width) {
        data.extend_from_slice(row);
        data.extend(std::iter::repeat_n(0.0, k));
    }
    params[1].weight = Some(Tensor::new(vec![outputs, width], data)?);
    let head = Network::from_parts(specs, &[width], params)?;
    let mut actions = net.actions.clone();
    actions.extend(extra.iter().cloned());
    ClassifierNet::from_parts(net.extractor.clone(), head, actions)
}

/// Classifier source for `target` built from a checkpoint over a shared subset
/// or superset of actions. Actions unknown to the checkpoint answer 1 until
/// the classifier has trained on them.
pub fn adapt_classifier(ckpt: &Checkpoint, target: &[Action]) -> Result<KnowledgeSource> {
    let CheckpointNets::Classifier(net) = &ckpt.nets else {
        return Err(Error::Architecture(
            "checkpoint holds a policy, not a classifier".into(),
        ));
    };
    let names = action_names(target);
    if !names.iter().any(|n| ckpt.meta.actions.contains(n)) {
        return Err(mismatch(&ckpt.meta, target));
    }
    let extra: Vec<String> = names
        .iter()
        .filter(|n| !ckpt.meta.actions.contains(n))
        .cloned()
        .collect();
    let widened = widen_classifier(net, &extra)?;
    let action_map = names
        .iter()
        .map(|n| {
            widened
                .actions
                .iter()
                .position(|m| m == n)
                .expect("every target action has a slot")
        })
        .collect();
    let pending = names.iter().map(|n| extra.contains(n)).collect();
    Ok(KnowledgeSource::Classifier(ClassifierSource::with_mapping(
        widened, action_map, pending,
    )?))
}

fn policy_of(ckpt: &Checkpoint) -> Result<&PolicyNet> {
    match &ckpt.nets {
        CheckpointNets::Policy(p) => Ok(p),
        CheckpointNets::Classifier(_) => Err(Error::Architecture(
            "checkpoint holds a classifier, not a policy".into(),
        )),
    }
}

/// Policy initialized with the checkpoint's weights. The action sets must match.
pub fn warm_start(ckpt: &Checkpoint, env: &EnvSpec) -> Result<PolicyNet> {
    let policy = policy_of(ckpt)?;
    if ckpt.meta.actions != action_names(&env.actions) {
        return Err(mismatch(&ckpt.meta, &env.actions));
    }
    if policy.obs_shape() != env.observation_shape() {
        return Err(Error::Architecture(format!(
            "policy observes {:?}, task produces {:?}",
            policy.obs_shape(),
            env.observation_shape()
        )));
    }
    Ok(policy.clone())
}

/// Warm start across action sets: extractor and value head are copied, policy
/// head rows are copied for shared action names and taken from `fresh` otherwise.
pub fn warm_start_shared(ckpt: &Checkpoint, env: &EnvSpec, fresh: &PolicyNet) -> Result<PolicyNet> {
    let policy = policy_of(ckpt)?;
    let names = action_names(&env.actions);
    if !names.iter().any(|n| ckpt.meta.actions.contains(n)) {
        return Err(mismatch(&ckpt.meta, &env.actions));
    }
    if policy.obs_shape() != env.observation_shape()
        || fresh.extractor.specs() != policy.extractor.specs()
        || fresh.num_actions() != names.len()
    {
        return Err(Error::Architecture(
            "warm start needs matching extractors and observation shapes".into(),
        ));
    }
    let src = &policy.policy_head.params()[0];
    let dst = &fresh.policy_head.params()[0];
    let (sw, sb) = (
        src.weight.as_ref().expect("dense weight"),
        src.bias.as_ref().expect("dense bias"),
    );
    let (dw, db) = (
        dst.weight.as_ref().expect("dense weight"),
        dst.bias.as_ref().expect("dense bias"),
    );
    let features = dw.shape()[1];
    let mut weight = dw.data().to_vec();
    let mut bias = db.data().to_vec();
    for (i, n) in names.iter().enumerate() {
        if let Some(j) = ckpt.meta.actions.iter().position(|m| m == n) {
            weight[i * features..(i + 1) * features].copy_from_slice(&sw.data()[j * features..(j + 1) * features]);
            bias[i] = sb.data()[j];
        }
    }
    let head = Network::from_parts(
        fresh.policy_head.specs().to_vec(),
        fresh.policy_head.input_shape(),
        vec![LayerParams {
            weight: Some(Tensor::new(dw.shape().to_vec(), weight)?),
            bias: Some(Tensor::new(db.shape().to_vec(), bias)?),
            running_mean: None,
            running_var: None,
        }],
    )?;
    PolicyNet::from_parts(policy.extractor.clone(), head, policy.value_head.clone())
}

/// Frozen expert for policy reuse, mapped onto `env`'s actions by name.
pub fn reuse_expert(ckpt: &Checkpoint, env: &EnvSpec, psi: f64) -> Result<Expert> {
    let policy = policy_of(ckpt)?;
    if policy.obs_shape() != env.observation_shape() {
        return Err(Error::Architecture("expert observes a different tensor shape".into()));
    }
    Expert::new(policy.clone(), &ckpt.meta.actions, &env.actions, psi)
}
