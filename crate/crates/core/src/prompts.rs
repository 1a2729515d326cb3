//! Prompt templates shipped as text assets under `prompts/`.

/// A system prompt plus an optional user-prompt template with `{name}` slots.
#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

macro_rules! template {
    ($ident:ident, $name:literal) => {
        pub const $ident: PromptTemplate = PromptTemplate {
            name: $name,
            system: include_str!(concat!("../prompts/", $name, ".system.txt")),
            user: include_str!(concat!("../prompts/", $name, ".user.txt")),
        };
    };
    ($ident:ident, $name:literal, system_only) => {
        pub const $ident: PromptTemplate = PromptTemplate {
            name: $name,
            system: include_str!(concat!("../prompts/", $name, ".system.txt")),
            user: "",
        };
    };
    ($ident:ident, $name:literal, user_only) => {
        pub const $ident: PromptTemplate = PromptTemplate {
            name: $name,
            system: "",
            user: include_str!(concat!("../prompts/", $name, ".user.txt")),
        };
    };
}

template!(CORE_TASK, "core_task");
template!(CONTRIBUTIONS, "contributions");
template!(PRIMARY_QUERY, "primary_query");
template!(QUERY_VARIANTS, "query_variants");
template!(PUBLICATION_DATE, "publication_date");
template!(TAXONOMY, "taxonomy", system_only);
template!(TAXONOMY_REPAIR, "taxonomy_repair", system_only);
template!(NARRATIVE, "narrative", system_only);
template!(ONE_LINER, "one_liner", system_only);
template!(SIMILARITY, "similarity", user_only);
template!(CONTRIBUTION_COMPARISON, "contribution_comparison");
template!(OVERALL_ASSESSMENT, "overall_assessment", system_only);
template!(SIBLING_DISTINCTION, "sibling_distinction", system_only);
template!(SUBTOPIC_COMPARISON, "subtopic_comparison", system_only);

pub const ALL: [PromptTemplate; 14] = [
    CORE_TASK,
    CONTRIBUTIONS,
    PRIMARY_QUERY,
    QUERY_VARIANTS,
    PUBLICATION_DATE,
    TAXONOMY,
    TAXONOMY_REPAIR,
    NARRATIVE,
    ONE_LINER,
    SIMILARITY,
    CONTRIBUTION_COMPARISON,
    OVERALL_ASSESSMENT,
    SIBLING_DISTINCTION,
    SUBTOPIC_COMPARISON,
];

impl PromptTemplate {
    pub fn render_user(&self, vars: &[(&str, &str)]) -> String {
        fill(self.user, vars)
    }

    pub fn render_system(&self, vars: &[(&str, &str)]) -> String {
        fill(self.system, vars)
    }
}

/// Single-pass `{name}` substitution; substituted text is never rescanned.
/// Braces that do not name a provided variable are left untouched.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        let s = fill("T: {title} / {body} / {\"json\": 1}", &[("title", "{body}"), ("body", "B")]);
        assert_eq!(s, "T: {body} / B / {\"json\": 1}");
    }

    #[test]
    fn templates_have_their_slots() {
        assert!(CORE_TASK.user.contains("{title}"));
        assert!(CORE_TASK.user.contains("{body_text}"));
        assert!(SIMILARITY.user.contains("{paper_a}") && SIMILARITY.user.contains("{paper_b}"));
        assert!(SIBLING_DISTINCTION.system.contains("{core_task_text}"));
        assert!(CONTRIBUTION_COMPARISON.user.contains("{cand_text}"));
        for t in ALL {
            assert!(!(t.system.is_empty() && t.user.is_empty()), "{} is empty", t.name);
        }
    }
}
