//! Minimal JSON Schema validator covering the subset used by the pipeline's
//! output contracts: `type` (string or array), `properties`, `required`,
//! `additionalProperties` (boolean), `items`, `enum`, `minimum`, `maximum`,
//! and `anyOf`. Purpose-built so structured responses can be checked without
//! a general-purpose engine.

use serde_json::Value;

/// One failed constraint, with the instance path that violated it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaCheckError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaCheckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Validate `instance` against `schema`; empty result means valid.
pub fn check(schema: &Value, instance: &Value) -> Vec<SchemaCheckError> {
    let mut errors = Vec::new();
    check_at(schema, instance, "$", &mut errors);
    errors
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                "integer"
            } else {
                "number"
            }
        }
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn matches_type(expected: &str, instance: &Value) -> bool {
    match expected {
        "number" => instance.is_number(),
        "integer" => instance.is_i64() || instance.is_u64(),
        other => type_name(instance) == other,
    }
}

fn check_at(schema: &Value, instance: &Value, path: &str, errors: &mut Vec<SchemaCheckError>) {
    let Some(schema_obj) = schema.as_object() else {
        return; // `true`/non-object schemas accept everything
    };

    if let Some(any_of) = schema_obj.get("anyOf").and_then(|v| v.as_array()) {
        let passes = any_of.iter().any(|sub| {
            let mut sub_errors = Vec::new();
            check_at(sub, instance, path, &mut sub_errors);
            sub_errors.is_empty()
        });
        if !passes {
            errors.push(SchemaCheckError {
                path: path.to_string(),
                message: format!("{} matched no anyOf branch", type_name(instance)),
            });
        }
        return;
    }

    match schema_obj.get("type") {
        Some(Value::String(expected)) => {
            if !matches_type(expected, instance) {
                errors.push(SchemaCheckError {
                    path: path.to_string(),
                    message: format!("expected {expected}, got {}", type_name(instance)),
                });
                return;
            }
        }
        Some(Value::Array(alternatives)) => {
            let ok = alternatives
                .iter()
                .filter_map(|t| t.as_str())
                .any(|t| matches_type(t, instance));
            if !ok {
                errors.push(SchemaCheckError {
                    path: path.to_string(),
                    message: format!("got {}, expected one of {alternatives:?}", type_name(instance)),
                });
                return;
            }
        }
        _ => {}
    }

    if let Some(allowed) = schema_obj.get("enum").and_then(|v| v.as_array()) {
        if !allowed.contains(instance) {
            errors.push(SchemaCheckError {
                path: path.to_string(),
                message: format!("{instance} is not one of the allowed values"),
            });
        }
    }

    if let Some(v) = instance.as_f64() {
        if let Some(min) = schema_obj.get("minimum").and_then(|m| m.as_f64()) {
            if v < min {
                errors.push(SchemaCheckError {
                    path: path.to_string(),
                    message: format!("{v} is below minimum {min}"),
                });
            }
        }
        if let Some(max) = schema_obj.get("maximum").and_then(|m| m.as_f64()) {
            if v > max {
                errors.push(SchemaCheckError {
                    path: path.to_string(),
                    message: format!("{v} is above maximum {max}"),
                });
            }
        }
    }

    if let Some(obj) = instance.as_object() {
        if let Some(required) = schema_obj.get("required").and_then(|v| v.as_array()) {
            for name in required.iter().filter_map(|v| v.as_str()) {
                if !obj.contains_key(name) {
                    errors.push(SchemaCheckError {
                        path: format!("{path}.{name}"),
                        message: "required field missing".to_string(),
                    });
                }
            }
        }
        let properties = schema_obj.get("properties").and_then(|v| v.as_object());
        for (name, value) in obj {
            match properties.and_then(|p| p.get(name)) {
                Some(sub) => check_at(sub, value, &format!("{path}.{name}"), errors),
                None => {
                    if schema_obj.get("additionalProperties") == Some(&Value::Bool(false)) {
                        errors.push(SchemaCheckError {
                            path: format!("{path}.{name}"),
                            message: "additional property not allowed".to_string(),
                        });
                    }
                }
            }
        }
    }

    if let Some(items) = instance.as_array() {
        if let Some(item_schema) = schema_obj.get("items") {
            for (i, item) in items.iter().enumerate() {
                check_at(item_schema, item, &format!("{path}[{i}]"), errors);
            }
        }
    }
}
