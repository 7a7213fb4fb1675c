//! Prompt templates for remote surrogates.
//!
//! Placeholders: `$known_info`, `$known_data`, `$feature_to_sample`,
//! `$ref_info`, `$all_features`, `$unknown_features`, `$n`,
//! `$potential_diagnosis`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSchema, FeatureKind, FeatureSpec};

use super::SurrogateError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub risk: String,
    pub global: String,
    pub implicit: String,
    pub sampling: String,
}

const STRICT_OUTPUT: &str = "IMPORTANT: Under NO circumstances provide explanations, commentary, \
or text beyond the single numeric float or string requested. The response MUST be parseable \
strictly as a float, e.g., 0.512, with no extra words. If a string is requested no float is required.";

const DIVERSITY: &str = "Avoid returning the same value repeatedly across multiple draws, and \
ensure the value varies as if sampled from a plausible distribution. Introduce randomness by \
considering edge cases, typical values, and outliers within the plausible range.";

impl PromptTemplates {
    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SurrogateError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| SurrogateError::Config(format!("{}: {e}", path.display())))
    }

    pub fn for_schema(schema: &DatasetSchema) -> Self {
        match schema.prompt_family.as_deref() {
            Some("ckd") => Self::ckd(),
            Some("hepatitis") => Self::hepatitis(),
            Some("diabetes") => Self::diabetes(),
            Some("osce") => Self::osce(),
            _ => Self::generic(
                schema.specialist.as_deref().unwrap_or("clinician"),
                &schema.disease_name,
            ),
        }
    }

    pub fn ckd() -> Self {
        Self {
            risk: "You are an expert nephrologist. Based on the following clinical data and the \
patient's history, provide an estimate of the patient having chronic kidney disease as a single \
number between 0 and 1. Consider key laboratory markers and other pertinent values. When these \
values indicate kidney disease or damage—assign a number closer to 1, indicating a higher \
probability of chronic kidney disease. If the laboratory values are within normal ranges, assign \
a value closer to 0. Return only the number that can be converted to a Python float, without any \
additional commentary.\n$known_info"
                .into(),
            global: "You are an expert nephrologist. Based on the following list of features: \
$all_features, please indicate which $n features you believe are the most informative and \
critical for diagnosing chronic kidney disease.\n\nReturn your answer as a Python list of exactly \
$n feature names.\nFor example: if n is 1, return ['age']; if n is 2, return ['age', 'bp'].\n\n\
Do not include any additional commentary."
                .into(),
            implicit: "You are an expert nephrologist. Based solely on the following known \
clinical data, determine which additional feature from the list below would be the most \
informative to sample next for diagnosing chronic kidney disease.\n\nKnown Data: $known_data\n\n\
Unknown Features: $unknown_features\n\nReturn only the name of the feature strictly in the form \
shown in the list as a string, without any additional commentary."
                .into(),
            sampling: format!(
                "You are an expert nephrologist. Based on the following clinical data and the \
patient's history, please simulate a random draw from the full range of clinically plausible \
values for $feature_to_sample.\n\nThe value should not simply be the average or a central \
tendency, but should vary as if sampled at random from a realistic distribution. Consider the \
following description: $ref_info.\n\n{DIVERSITY}\n\nReturn your answer as a single numeric value \
that can be parsed into a float in Python, with no additional commentary or units.\n\n\
IMPORTANT: Assume that the patient may or may not have chronic kidney disease, and your sampling \
should reflect that uncertainty.\n$known_info\n\n{STRICT_OUTPUT}"
            ),
        }
    }

    pub fn hepatitis() -> Self {
        Self {
            risk: "You are an expert hepatologist. Based on the following clinical data and the \
patient's history, please provide an estimate of the patient's risk of being infected with \
hepatitis C as a single number between 0 and 1. Consider key laboratory markers and other \
pertinent values. When these values indicate liver inflammation or damage — assign a number \
closer to 1, indicating a higher probability of hepatitis C infection. If the laboratory values \
are within normal ranges, assign a value closer to 0. Return only the number that can be \
converted to a Python float, without any additional commentary.\n$known_info"
                .into(),
            global: "You are an expert hepatologist. Based on the following list of features: \
$all_features, please indicate which $n features you believe are the most informative and \
critical for diagnosing hepatitis.\n\nReturn your answer as a Python list of exactly $n feature \
names (for example, if n is 1, return ['ALT']; if n is 2, return ['ALT', 'AST']), without any \
additional commentary."
                .into(),
            implicit: "You are an expert hepatologist. Based solely on the following known \
clinical data, determine which additional feature from the list below would be the most \
informative to sample next for diagnosing hepatitis.\n\nKnown Data: $known_data\n\nUnknown \
Features: $unknown_features\n\nReturn only the name of the feature as a string, without any \
additional commentary."
                .into(),
            sampling: format!(
                "You are an expert hepatologist. Based on the following clinical data and the \
patient's history, please simulate a random draw from the full range of clinically plausible \
values for $feature_to_sample.\n\nConsider the possible range as described: $ref_info. Ensure \
that the value you return is realistic and reflects clinical variability. {DIVERSITY}\n\nReturn \
your answer as a single numeric value that can be converted to a Python float, without any \
additional commentary.\n\nIMPORTANT: Assume that the patient may or may not have hepatitis C, \
and your sampling should reflect that uncertainty.\n$known_info\n\n{STRICT_OUTPUT}"
            ),
        }
    }

    pub fn diabetes() -> Self {
        Self {
            risk: "You are an expert endocrinologist. Based on the following clinical data and \
the patient's history, provide an estimate of the patient's risk of diabetes as a single number \
between 0 and 1.\n\nIt is known that all patients are females at least 21 years old of Pima \
Indian heritage. Focus on key markers. Assign a value closer to 1 if the data indicate high \
risk, and closer to 0 if within normal limits. Return only the number, without any additional \
commentary.\n$known_info"
                .into(),
            global: "You are an expert endocrinologist. Based on the following list of features: \
$all_features, please indicate which $n features you believe are the most informative and \
critical for diagnosing diabetes.\n\nReturn your answer as a Python list of exactly $n feature \
names (for example, if n is 1, return ['Glucose']; if n is 2, return ['Glucose', 'BMI']), \
without any additional commentary."
                .into(),
            implicit: "You are an expert endocrinologist. Based solely on the following known \
clinical data, determine which additional feature from the list below would be the most \
informative to sample next for diagnosing diabetes.\n\nKnown Data: $known_data\n\nUnknown \
Features: $unknown_features\n\nReturn only the name of the feature as a string, without any \
additional commentary."
                .into(),
            sampling: format!(
                "You are an expert endocrinologist. Based on the following clinical data and \
the patient's history, please simulate a random draw from the full range of clinically \
plausible values for $feature_to_sample.\n\nConsider the following unit for the sampled value: \
$ref_info. Ensure that the value you return is realistic and reflects clinical variability. \
{DIVERSITY}\n\nReturn your answer as a single numeric value that can be converted to a Python \
float with no units or additional commentary.\n\nIMPORTANT: Assume that the patient may or may \
not have diabetes, and your sampling should reflect that uncertainty.\n$known_info\n\n\
{STRICT_OUTPUT}"
            ),
        }
    }

    pub fn osce() -> Self {
        Self {
            risk: "You are an expert clinician. Given the following case details, estimate a \
realistic and conservative probability of the suspected diagnosis of $potential_diagnosis as a \
single number between 0 and 1. Return only the number that can be converted to a Python float, \
without any additional commentary.\n$known_info"
                .into(),
            global: "You are a clinical assistant. Given these case details: $known_data. Which \
additional feature from the list $unknown_features would be most informative next for the \
suspected diagnosis of $potential_diagnosis? Return only the feature name without commentary."
                .into(),
            implicit: "You are a clinical assistant. Given these case details: $known_data, which \
feature from the list $unknown_features would provide the most information next? Return only \
the feature name without commentary."
                .into(),
            sampling: format!(
                "You are a expert clinician. Based on the following case details, simulate a \
plausible value for $feature_to_sample\nReturn only the value without explanation.\n\n\
IMPORTANT: Assume that the patient may or may not have $potential_diagnosis, and your sampling \
should reflect that uncertainty.\n$known_info\n\n{STRICT_OUTPUT}"
            ),
        }
    }

    /// Same structure as the dataset-specific families, parameterized by role
    /// and disease.
    pub fn generic(specialist: &str, disease: &str) -> Self {
        Self {
            risk: format!(
                "You are an expert {specialist}. Based on the following clinical data and the \
patient's history, provide an estimate of the patient having {disease} as a single number \
between 0 and 1. Consider key laboratory markers and other pertinent values. Assign a number \
closer to 1 if the data indicate {disease}, and closer to 0 if the values are within normal \
ranges. Return only the number that can be converted to a Python float, without any additional \
commentary.\n$known_info"
            ),
            global: format!(
                "You are an expert {specialist}. Based on the following list of features: \
$all_features, please indicate which $n features you believe are the most informative and \
critical for diagnosing {disease}.\n\nReturn your answer as a Python list of exactly $n feature \
names, without any additional commentary."
            ),
            implicit: format!(
                "You are an expert {specialist}. Based solely on the following known clinical \
data, determine which additional feature from the list below would be the most informative to \
sample next for diagnosing {disease}.\n\nKnown Data: $known_data\n\nUnknown Features: \
$unknown_features\n\nReturn only the name of the feature strictly in the form shown in the list \
as a string, without any additional commentary."
            ),
            sampling: format!(
                "You are an expert {specialist}. Based on the following clinical data and the \
patient's history, please simulate a random draw from the full range of clinically plausible \
values for $feature_to_sample.\n\nThe value should not simply be the average or a central \
tendency, but should vary as if sampled at random from a realistic distribution. Consider the \
following description: $ref_info.\n\n{DIVERSITY}\n\nReturn your answer as a single numeric value \
that can be parsed into a float in Python, with no additional commentary or units.\n\n\
IMPORTANT: Assume that the patient may or may not have {disease}, and your sampling should \
reflect that uncertainty.\n$known_info\n\n{STRICT_OUTPUT}"
            ),
        }
    }
}

/// Templates bound to a schema; renders the user message of each query.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub templates: PromptTemplates,
    pub schema: DatasetSchema,
}

fn python_list(items: &[String]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| format!("'{s}'")).collect();
    format!("[{}]", quoted.join(", "))
}

impl PromptSet {
    pub fn new(templates: PromptTemplates, schema: DatasetSchema) -> Self {
        Self { templates, schema }
    }

    /// System message: the scenario description.
    pub fn system(&self) -> String {
        if self.schema.context_preamble.is_empty() {
            format!("You are assisting with the diagnosis of {}.", self.schema.disease_name)
        } else {
            self.schema.context_preamble.clone()
        }
    }

    pub fn risk(&self, vignette: &str, disease: &str) -> String {
        self.templates
            .risk
            .replace("$potential_diagnosis", disease)
            .replace("$known_info", vignette)
    }

    pub fn sampling(&self, vignette: &str, disease: &str, feature: &FeatureSpec) -> String {
        let mut prompt = self
            .templates
            .sampling
            .replace("$feature_to_sample", &feature.name)
            .replace("$ref_info", &feature.ref_info)
            .replace("$potential_diagnosis", disease)
            .replace("$known_info", vignette);
        if feature.kind == FeatureKind::Categorical {
            prompt.push_str(&format!(
                "\n\nThe requested value is a string. Answer with exactly one of: {}.",
                feature.categories.join(", ")
            ));
        }
        prompt
    }

    pub fn implicit(&self, vignette: &str, disease: &str, unknown: &[String]) -> String {
        self.templates
            .implicit
            .replace("$known_data", vignette)
            .replace("$unknown_features", &python_list(unknown))
            .replace("$potential_diagnosis", disease)
            .replace("$known_info", "")
    }

    pub fn global(&self, all: &[String], n: usize) -> String {
        self.templates
            .global
            .replace("$all_features", &python_list(all))
            .replace("$unknown_features", &python_list(all))
            .replace("$known_data", "")
            .replace("$known_info", "")
            .replace("$potential_diagnosis", &self.schema.disease_name)
            .replace("$n", &n.to_string())
    }
}
