//! JSON graph format.
//!
//! ```text
//! { "symbols": [{"name": str, "max": int?}],
//!   "tensors": [{"name", "dtype", "shape": [int | expr-string]?, "kind", "value": [int]?}],
//!   "nodes":   [{"id", "op", "inputs": [...], "outputs": [...], "attrs": {...}}],
//!   "meta":    {"name": str?, "kv_pairs": [{"past", "new", "arena", "slice"?}], "position_ids": str?} }
//! ```

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde_json::{json, Map, Value};

use super::{AttrValue, DType, Dim, Graph, GraphError, KvPair, Meta, NodeSpec, Op, SymbolDecl, TensorInfo, TensorKind};
use crate::symexpr::SymExpr;

type Obj = Map<String, Value>;

fn as_obj<'a>(v: &'a Value, path: &str) -> Result<&'a Obj, GraphError> {
    v.as_object().ok_or_else(|| GraphError::schema(path, "expected an object"))
}

fn as_arr<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, GraphError> {
    v.as_array().ok_or_else(|| GraphError::schema(path, "expected an array"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, GraphError> {
    v.as_str().ok_or_else(|| GraphError::schema(path, "expected a string"))
}

fn as_int(v: &Value, path: &str) -> Result<i64, GraphError> {
    v.as_i64().ok_or_else(|| GraphError::schema(path, "expected an integer"))
}

fn field<'a>(o: &'a Obj, key: &str, path: &str) -> Result<&'a Value, GraphError> {
    o.get(key).ok_or_else(|| GraphError::schema(format!("{path}.{key}"), "missing field"))
}

fn opt_field<'a>(o: &'a Obj, key: &str) -> Option<&'a Value> {
    o.get(key).filter(|v| !v.is_null())
}

fn str_list(v: &Value, path: &str) -> Result<Vec<String>, GraphError> {
    as_arr(v, path)?
        .iter()
        .enumerate()
        .map(|(i, s)| as_str(s, &format!("{path}[{i}]")).map(str::to_string))
        .collect()
}

fn parse_dim(v: &Value, path: &str) -> Result<Dim, GraphError> {
    match v {
        Value::Number(_) => {
            let n = as_int(v, path)?;
            if n < 1 {
                return Err(GraphError::ShapeArity { tensor: path.to_string(), reason: format!("literal dim {n} < 1") });
            }
            Ok(Dim::Lit(n as u64))
        }
        Value::String(s) => {
            let e: SymExpr = s.parse().map_err(|e| GraphError::schema(path, format!("{e}")))?;
            match e.as_constant() {
                Some(c) if c < 1 => {
                    Err(GraphError::ShapeArity { tensor: path.to_string(), reason: format!("constant dim {c} < 1") })
                }
                _ => Ok(Dim::from_expr(e)),
            }
        }
        _ => Err(GraphError::schema(path, "dim must be an integer or expression string")),
    }
}

fn parse_attr(v: &Value, path: &str) -> Result<AttrValue, GraphError> {
    match v {
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(AttrValue::Int(i))
            } else {
                n.as_f64().map(AttrValue::Float).ok_or_else(|| GraphError::schema(path, "number out of range"))
            }
        }
        Value::String(s) => Ok(AttrValue::Str(s.clone())),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, x)| as_int(x, &format!("{path}[{i}]")))
            .collect::<Result<Vec<_>, _>>()
            .map(AttrValue::Ints),
        _ => Err(GraphError::schema(path, "unsupported attribute value")),
    }
}

fn parse_tensor(v: &Value, path: &str) -> Result<TensorInfo, GraphError> {
    let o = as_obj(v, path)?;
    let name = as_str(field(o, "name", path)?, &format!("{path}.name"))?.to_string();
    let dtype_s = as_str(field(o, "dtype", path)?, &format!("{path}.dtype"))?;
    let dtype = DType::from_name(dtype_s)
        .ok_or_else(|| GraphError::schema(format!("{path}.dtype"), format!("unknown dtype `{dtype_s}`")))?;
    let kind_s = as_str(field(o, "kind", path)?, &format!("{path}.kind"))?;
    let kind = TensorKind::from_name(kind_s)
        .ok_or_else(|| GraphError::schema(format!("{path}.kind"), format!("unknown kind `{kind_s}`")))?;
    let shape = match opt_field(o, "shape") {
        None => None,
        Some(s) => {
            let sp = format!("{path}.shape");
            Some(
                as_arr(s, &sp)?
                    .iter()
                    .enumerate()
                    .map(|(i, d)| parse_dim(d, &format!("{sp}[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
    };
    let value = match opt_field(o, "value") {
        None => None,
        Some(vals) => {
            let vp = format!("{path}.value");
            Some(
                as_arr(vals, &vp)?
                    .iter()
                    .enumerate()
                    .map(|(i, x)| as_int(x, &format!("{vp}[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
    };
    Ok(TensorInfo { name, dtype, shape, kind, value })
}

fn parse_node(v: &Value, path: &str) -> Result<NodeSpec, GraphError> {
    let o = as_obj(v, path)?;
    let id = as_int(field(o, "id", path)?, &format!("{path}.id"))?;
    let op_s = as_str(field(o, "op", path)?, &format!("{path}.op"))?;
    let op = Op::from_name(op_s).ok_or_else(|| GraphError::UnknownOperator(op_s.to_string()))?;
    let inputs = str_list(field(o, "inputs", path)?, &format!("{path}.inputs"))?;
    let outputs = str_list(field(o, "outputs", path)?, &format!("{path}.outputs"))?;
    let mut attrs = BTreeMap::new();
    if let Some(a) = opt_field(o, "attrs") {
        let ap = format!("{path}.attrs");
        for (k, val) in as_obj(a, &ap)? {
            attrs.insert(k.clone(), parse_attr(val, &format!("{ap}.{k}"))?);
        }
    }
    Ok(NodeSpec { id, op, inputs, outputs, attrs })
}

fn parse_meta(v: Option<&Value>) -> Result<Meta, GraphError> {
    let Some(v) = v else { return Ok(Meta::default()) };
    let o = as_obj(v, "meta")?;
    let name = match opt_field(o, "name") {
        Some(n) => Some(as_str(n, "meta.name")?.to_string()),
        None => None,
    };
    let mut kv_pairs = Vec::new();
    if let Some(pairs) = opt_field(o, "kv_pairs") {
        for (i, p) in as_arr(pairs, "meta.kv_pairs")?.iter().enumerate() {
            let path = format!("meta.kv_pairs[{i}]");
            let po = as_obj(p, &path)?;
            let get = |k: &str| -> Result<String, GraphError> {
                Ok(as_str(field(po, k, &path)?, &format!("{path}.{k}"))?.to_string())
            };
            let slice = match opt_field(po, "slice") {
                Some(s) => Some(as_str(s, &format!("{path}.slice"))?.to_string()),
                None => None,
            };
            kv_pairs.push(KvPair { past: get("past")?, new: get("new")?, arena: get("arena")?, slice });
        }
    }
    let position_ids = match opt_field(o, "position_ids") {
        Some(p) => Some(as_str(p, "meta.position_ids")?.to_string()),
        None => None,
    };
    Ok(Meta { name, kv_pairs, position_ids })
}

/// Parses and validates a graph from UTF-8 JSON.
pub fn load_graph(source: &[u8]) -> Result<Graph, GraphError> {
    let text = std::str::from_utf8(source).map_err(|e| GraphError::schema("$", format!("invalid UTF-8: {e}")))?;
    let root: Value = serde_json::from_str(text).map_err(|e| {
        GraphError::schema(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let o = as_obj(&root, "$")?;

    let mut symbols = Vec::new();
    if let Some(syms) = opt_field(o, "symbols") {
        for (i, s) in as_arr(syms, "symbols")?.iter().enumerate() {
            let path = format!("symbols[{i}]");
            let so = as_obj(s, &path)?;
            let name = as_str(field(so, "name", &path)?, &format!("{path}.name"))?.to_string();
            let max = match opt_field(so, "max") {
                Some(m) => Some(as_int(m, &format!("{path}.max"))?),
                None => None,
            };
            symbols.push(SymbolDecl { name, max });
        }
    }

    let mut tensors = IndexMap::new();
    for (i, t) in as_arr(field(o, "tensors", "$")?, "tensors")?.iter().enumerate() {
        let path = format!("tensors[{i}]");
        let info = parse_tensor(t, &path)?;
        if tensors.contains_key(&info.name) {
            return Err(GraphError::schema(path, format!("duplicate tensor `{}`", info.name)));
        }
        tensors.insert(info.name.clone(), info);
    }

    let nodes = as_arr(field(o, "nodes", "$")?, "nodes")?
        .iter()
        .enumerate()
        .map(|(i, n)| parse_node(n, &format!("nodes[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;

    let meta = parse_meta(opt_field(o, "meta"))?;
    let graph = Graph { symbols, tensors, nodes, meta };
    graph.validate()?;
    Ok(graph)
}

fn dim_value(d: &Dim) -> Value {
    match d {
        Dim::Lit(v) => json!(v),
        Dim::Sym(e) => json!(e.to_string()),
    }
}

fn attr_value(a: &AttrValue) -> Value {
    match a {
        AttrValue::Int(v) => json!(v),
        AttrValue::Ints(v) => json!(v),
        AttrValue::Float(v) => json!(v),
        AttrValue::Str(s) => json!(s),
    }
}

pub fn graph_to_value(g: &Graph) -> Value {
    let symbols: Vec<Value> = g
        .symbols
        .iter()
        .map(|s| match s.max {
            Some(m) => json!({"name": s.name, "max": m}),
            None => json!({"name": s.name}),
        })
        .collect();
    let tensors: Vec<Value> = g
        .tensors
        .values()
        .map(|t| {
            let mut o = Obj::new();
            o.insert("name".into(), json!(t.name));
            o.insert("dtype".into(), json!(t.dtype.name()));
            if let Some(shape) = &t.shape {
                o.insert("shape".into(), Value::Array(shape.iter().map(dim_value).collect()));
            }
            o.insert("kind".into(), json!(t.kind.name()));
            if let Some(v) = &t.value {
                o.insert("value".into(), json!(v));
            }
            Value::Object(o)
        })
        .collect();
    let nodes: Vec<Value> = g
        .nodes
        .iter()
        .map(|n| {
            let attrs: Obj = n.attrs.iter().map(|(k, v)| (k.clone(), attr_value(v))).collect();
            json!({"id": n.id, "op": n.op.name(), "inputs": n.inputs, "outputs": n.outputs, "attrs": attrs})
        })
        .collect();
    let kv: Vec<Value> = g
        .meta
        .kv_pairs
        .iter()
        .map(|p| {
            let mut o = json!({"past": p.past, "new": p.new, "arena": p.arena});
            if let Some(s) = &p.slice {
                o["slice"] = json!(s);
            }
            o
        })
        .collect();
    let mut meta = Obj::new();
    if let Some(n) = &g.meta.name {
        meta.insert("name".into(), json!(n));
    }
    meta.insert("kv_pairs".into(), Value::Array(kv));
    if let Some(p) = &g.meta.position_ids {
        meta.insert("position_ids".into(), json!(p));
    }
    json!({"symbols": symbols, "tensors": tensors, "nodes": nodes, "meta": meta})
}

/// Serializes a graph as pretty-printed JSON with symbolic dims as
/// expression strings.
pub fn save_graph(g: &Graph) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&graph_to_value(g)).expect("graph JSON is always serializable");
    out.push(b'\n');
    out
}
