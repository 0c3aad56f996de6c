use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

/// JSON type of a declared tool parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Number,
    Integer,
    String,
    Boolean,
}

impl ParamType {
    fn as_str(self) -> &'static str {
        match self {
            ParamType::Number => "number",
            ParamType::Integer => "integer",
            ParamType::String => "string",
            ParamType::Boolean => "boolean",
        }
    }

    fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::Number => value.is_number(),
            ParamType::Integer => value.as_i64().is_some() || value.as_f64().is_some_and(|f| f.fract() == 0.0),
            ParamType::String => value.is_string(),
            ParamType::Boolean => value.is_boolean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub kind: ParamType,
    pub description: String,
    pub required: bool,
    /// Inclusive numeric range.
    pub range: Option<(f64, f64)>,
}

impl ParamDecl {
    pub fn number(name: &str, description: &str) -> Self {
        ParamDecl {
            name: name.into(),
            kind: ParamType::Number,
            description: description.into(),
            required: true,
            range: None,
        }
    }

    pub fn integer(name: &str, description: &str) -> Self {
        ParamDecl {
            kind: ParamType::Integer,
            ..Self::number(name, description)
        }
    }

    pub fn string(name: &str, description: &str) -> Self {
        ParamDecl {
            kind: ParamType::String,
            ..Self::number(name, description)
        }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.range = Some((min, max));
        self
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }
}

/// How a tool describes its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Parameters {
    Declared(Vec<ParamDecl>),
    /// A ready-made JSON Schema, e.g. one advertised by a remote MCP server.
    Schema(Value),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Parameters,
    pub produces_images: bool,
    /// High-risk tools (code execution and the like) require approval by default.
    pub high_risk: bool,
}

impl ToolSpec {
    pub fn new(name: &str, description: &str, params: Vec<ParamDecl>) -> Self {
        ToolSpec {
            name: name.into(),
            description: description.into(),
            parameters: Parameters::Declared(params),
            produces_images: false,
            high_risk: false,
        }
    }

    pub fn producing_images(mut self) -> Self {
        self.produces_images = true;
        self
    }

    pub fn high_risk(mut self) -> Self {
        self.high_risk = true;
        self
    }

    pub fn declared_params(&self) -> &[ParamDecl] {
        match &self.parameters {
            Parameters::Declared(p) => p,
            Parameters::Schema(_) => &[],
        }
    }

    /// Inclusive numeric ranges per parameter, from declarations or from
    /// `minimum`/`maximum` in a schema.
    pub fn ranges(&self) -> Vec<(String, (f64, f64))> {
        match &self.parameters {
            Parameters::Declared(params) => params.iter().filter_map(|p| p.range.map(|r| (p.name.clone(), r))).collect(),
            Parameters::Schema(schema) => schema_properties(schema)
                .iter()
                .filter_map(|(name, prop)| {
                    let min = prop.get("minimum")?.as_f64()?;
                    let max = prop.get("maximum")?.as_f64()?;
                    Some((name.clone(), (min, max)))
                })
                .collect(),
        }
    }

    /// Checks arguments against the declared parameters or the schema.
    pub fn validate(&self, args: &Map<String, Value>) -> Result<(), ToolError> {
        match &self.parameters {
            Parameters::Declared(params) => validate_arguments(params, args),
            Parameters::Schema(schema) => validate_against_schema(schema, args),
        }
    }

    pub fn schema(&self) -> ToolSchema {
        let parameters = match &self.parameters {
            Parameters::Schema(schema) => schema.clone(),
            Parameters::Declared(params) => schema_from_declarations(params),
        };
        ToolSchema {
            name: self.name.clone(),
            description: self.description.clone(),
            parameters,
        }
    }
}

/// Tool contract as sent to the model and listed over MCP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

impl ToolSchema {
    pub fn to_openai(&self) -> Value {
        json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters,
            }
        })
    }
}

pub fn schema_from_declarations(params: &[ParamDecl]) -> Value {
    let mut properties = Map::new();
    let mut required = Vec::new();
    for p in params {
        let mut prop = Map::new();
        prop.insert("type".into(), json!(p.kind.as_str()));
        prop.insert("description".into(), json!(p.description));
        if let Some((min, max)) = p.range {
            prop.insert("minimum".into(), json!(min));
            prop.insert("maximum".into(), json!(max));
        }
        properties.insert(p.name.clone(), Value::Object(prop));
        if p.required {
            required.push(json!(p.name));
        }
    }
    json!({
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": false,
    })
}

/// Checks arguments against declared parameters: presence, JSON type and no
/// unknown keys. Range limits are a policy concern and checked separately.
pub fn validate_arguments(params: &[ParamDecl], args: &Map<String, Value>) -> Result<(), ToolError> {
    for p in params {
        match args.get(&p.name) {
            None | Some(Value::Null) if p.required => {
                return Err(ToolError::InvalidArguments(format!(
                    "missing required parameter '{}'",
                    p.name
                )))
            }
            Some(v) if !v.is_null() && !p.kind.accepts(v) => {
                return Err(ToolError::InvalidArguments(format!(
                    "parameter '{}' must be of type {}",
                    p.name,
                    p.kind.as_str()
                )))
            }
            _ => {}
        }
    }
    if let Some(unknown) = args.keys().find(|k| !params.iter().any(|p| &p.name == *k)) {
        return Err(ToolError::InvalidArguments(format!("unknown parameter '{unknown}'")));
    }
    Ok(())
}

fn schema_properties(schema: &Value) -> Map<String, Value> {
    schema.get("properties").and_then(Value::as_object).cloned().unwrap_or_default()
}

/// The subset of JSON Schema that tool schemas use: top-level `properties`
/// with primitive `type`s, `required` and `additionalProperties: false`.
/// Anything else is left to the tool.
pub fn validate_against_schema(schema: &Value, args: &Map<String, Value>) -> Result<(), ToolError> {
    let properties = schema_properties(schema);
    let required = schema.get("required").and_then(Value::as_array).cloned().unwrap_or_default();
    for name in required.iter().filter_map(Value::as_str) {
        if args.get(name).is_none_or(Value::is_null) {
            return Err(ToolError::InvalidArguments(format!("missing required parameter '{name}'")));
        }
    }
    let closed = schema.get("additionalProperties") == Some(&Value::Bool(false));
    for (name, value) in args {
        let Some(prop) = properties.get(name) else {
            if closed {
                return Err(ToolError::InvalidArguments(format!("unknown parameter '{name}'")));
            }
            continue;
        };
        let kind = prop
            .get("type")
            .and_then(|t| serde_json::from_value::<ParamType>(t.clone()).ok());
        if let Some(kind) = kind {
            if !value.is_null() && !kind.accepts(value) {
                return Err(ToolError::InvalidArguments(format!(
                    "parameter '{name}' must be of type {}",
                    kind.as_str()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToolOutput {
    pub text: String,
    pub image_paths: Vec<PathBuf>,
}

impl ToolOutput {
    pub fn text(text: impl Into<String>) -> Self {
        ToolOutput {
            text: text.into(),
            image_paths: Vec::new(),
        }
    }

    pub fn with_images(text: impl Into<String>, image_paths: Vec<PathBuf>) -> Self {
        ToolOutput {
            text: text.into(),
            image_paths,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ToolError {
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error("{0}")]
    Failed(String),
}

/// A stateful tool callable by the agent.
pub trait Tool: Send {
    fn spec(&self) -> ToolSpec;
    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError>;
}

/// Numeric argument helper for tool implementations.
pub fn arg_f64(args: &Map<String, Value>, name: &str) -> Result<f64, ToolError> {
    args.get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| ToolError::InvalidArguments(format!("missing numeric parameter '{name}'")))
}

pub fn arg_usize(args: &Map<String, Value>, name: &str) -> Result<usize, ToolError> {
    let v = arg_f64(args, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(ToolError::InvalidArguments(format!(
            "parameter '{name}' must be a non-negative integer"
        )));
    }
    Ok(v as usize)
}
