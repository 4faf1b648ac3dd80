use std::collections::{BTreeMap, BTreeSet};

use super::{ExtractionBundle, IngestError};

fn key(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Lowercased, trimmed alias or canonical name mapped to every profile that
/// claims it. More than one owner means the disjointness rule is broken.
pub fn alias_map(bundle: &ExtractionBundle) -> BTreeMap<String, BTreeSet<String>> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in &bundle.profiles {
        for name in std::iter::once(&p.canonical_name).chain(p.aliases.iter()) {
            map.entry(key(name)).or_default().insert(p.canonical_name.clone());
        }
    }
    map
}

/// Rewrite every name mention (entity names, relation arguments, event
/// participants, profile relationship targets) that matches an alias or a
/// canonical name, case-insensitively after trimming, to the canonical name.
pub fn normalize_aliases(bundle: &ExtractionBundle) -> Result<ExtractionBundle, IngestError> {
    let map = alias_map(bundle);
    let resolve = |name: &mut String| -> Result<(), IngestError> {
        if let Some(owners) = map.get(&key(name)) {
            if owners.len() > 1 {
                return Err(IngestError::AliasConflict {
                    mention: name.clone(),
                    owners: owners.iter().cloned().collect(),
                });
            }
            let canonical = owners.iter().next().expect("non-empty owner set");
            if name != canonical {
                *name = canonical.clone();
            }
        }
        Ok(())
    };

    let mut out = bundle.clone();
    for e in &mut out.entities {
        resolve(&mut e.name)?;
    }
    for r in &mut out.relations {
        resolve(&mut r.subject)?;
        resolve(&mut r.object)?;
        for arg in &mut r.extra_arguments {
            resolve(arg)?;
        }
    }
    for ev in &mut out.events {
        for p in &mut ev.participants {
            resolve(p)?;
        }
    }
    for profile in &mut out.profiles {
        for rel in &mut profile.relationships {
            resolve(&mut rel.other_canonical_name)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CharacterProfile, RelationRecord};

    fn profile(name: &str, aliases: &[&str]) -> CharacterProfile {
        let mut p = CharacterProfile::new(name);
        p.aliases = aliases.iter().map(|s| s.to_string()).collect();
        p
    }

    fn relation(s: &str, o: &str) -> RelationRecord {
        RelationRecord {
            subject: s.into(),
            object: o.into(),
            description: "imprisons".into(),
            span_id: "c000-s000".into(),
            story_time: 0,
            extra_arguments: vec![],
        }
    }

    fn bundle() -> ExtractionBundle {
        ExtractionBundle {
            profiles: vec![
                profile("Captain Nemo", &["Nemo"]),
                profile("Professor Aronnax", &["Aronnax"]),
            ],
            relations: vec![relation("Nemo", "Aronnax")],
            ..Default::default()
        }
    }

    #[test]
    fn nemo_to_captain_nemo() {
        let out = normalize_aliases(&bundle()).unwrap();
        assert_eq!(out.relations[0].subject, "Captain Nemo");
        assert_eq!(out.relations[0].object, "Professor Aronnax");
        assert_eq!(out.relations[0].description, "imprisons");
    }

    #[test]
    fn matching_is_case_insensitive_and_trimmed() {
        let mut b = bundle();
        b.relations[0].subject = "  nEMO ".into();
        let out = normalize_aliases(&b).unwrap();
        assert_eq!(out.relations[0].subject, "Captain Nemo");
    }

    #[test]
    fn no_alias_occurrences_is_identity() {
        let mut b = bundle();
        b.relations = vec![relation("Ned Land", "Conseil")];
        assert_eq!(normalize_aliases(&b).unwrap(), b);
    }

    #[test]
    fn idempotent() {
        let once = normalize_aliases(&bundle()).unwrap();
        assert_eq!(normalize_aliases(&once).unwrap(), once);
    }

    #[test]
    fn conflicting_owner_is_an_error() {
        let mut b = bundle();
        b.profiles[1].aliases.insert("nemo".into());
        let err = normalize_aliases(&b).unwrap_err();
        match err {
            IngestError::AliasConflict { owners, .. } => {
                assert_eq!(owners, vec!["Captain Nemo", "Professor Aronnax"])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn no_fuzzy_matching() {
        let mut b = bundle();
        b.relations[0].subject = "Nemos".into();
        let out = normalize_aliases(&b).unwrap();
        assert_eq!(out.relations[0].subject, "Nemos");
    }
}
