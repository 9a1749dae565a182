//! Deterministic synthetic clinical corpus with planted, checkable facts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::NoteId;
use crate::store::{Author, NoteRecord, Patient};

use super::IngestError;

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub num_patients: usize,
    /// Inclusive range of notes per patient, drawn uniformly.
    pub notes_per_patient: (usize, usize),
    pub first_note_id: u64,
    pub specialties: Vec<String>,
    pub departments: Vec<String>,
    pub note_categories: Vec<String>,
    pub encounter_types: Vec<String>,
    pub author_roles: Vec<String>,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    /// Inclusive range of filler sentences per note section.
    pub sentences_per_section: (usize, usize),
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_patients: 50,
            notes_per_patient: (3, 8),
            first_note_id: 100_000,
            specialties: strings(&[
                "Pediatric Oncology",
                "Pediatric Neurology",
                "Pediatric Cardiology",
                "Orthopedic Surgery",
                "General Pediatrics",
                "Pulmonology",
            ]),
            departments: strings(&["Oncology Clinic", "Neurology Clinic", "Emergency Department", "Inpatient Ward", "Primary Care"]),
            note_categories: strings(&["Progress Note", "Consult Note", "History and Physical", "Discharge Summary", "Telephone Encounter"]),
            encounter_types: strings(&["Office Visit", "Hospital Encounter", "Telemedicine", "Emergency Visit"]),
            author_roles: strings(&["Physician", "Nurse Practitioner", "Resident", "Registered Nurse", "Social Worker"]),
            start_date: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            end_date: NaiveDate::from_ymd_opt(2023, 12, 31).expect("valid date"),
            sentences_per_section: (1, 4),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidSpec(m.to_string()));
        if self.notes_per_patient.0 == 0 || self.notes_per_patient.0 > self.notes_per_patient.1 {
            return bad("notes_per_patient must be a non-empty range starting at 1 or more");
        }
        if self.sentences_per_section.0 > self.sentences_per_section.1 {
            return bad("sentences_per_section range is inverted");
        }
        if self.end_date < self.start_date {
            return bad("end_date precedes start_date");
        }
        for (name, v) in [
            ("specialties", &self.specialties),
            ("departments", &self.departments),
            ("note_categories", &self.note_categories),
            ("encounter_types", &self.encounter_types),
            ("author_roles", &self.author_roles),
        ] {
            if v.is_empty() {
                return Err(IngestError::InvalidSpec(format!("{name} must not be empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactKind {
    Condition,
    OnsetAge,
    Injury,
}

/// A fact written verbatim into one or more of a patient's notes. The
/// distractors come from the same catalog and never appear in any of that
/// patient's notes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedFact {
    pub patient_mrn: String,
    pub kind: FactKind,
    pub question: String,
    pub answer: String,
    pub distractors: Vec<String>,
    pub note_ids: Vec<NoteId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub notes: Vec<NoteRecord>,
    pub facts: Vec<PlantedFact>,
}

impl SyntheticCorpus {
    /// Writes `notes.jsonl` and `facts.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), IngestError> {
        std::fs::create_dir_all(dir)?;
        crate::store::write_jsonl(&dir.join(NOTES_FILE), &self.notes)?;
        let mut w = BufWriter::new(File::create(dir.join(FACTS_FILE))?);
        for f in &self.facts {
            serde_json::to_writer(&mut w, f).map_err(|e| IngestError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const NOTES_FILE: &str = "notes.jsonl";
pub const FACTS_FILE: &str = "facts.jsonl";

pub fn read_facts(path: &Path) -> Result<Vec<PlantedFact>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| IngestError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub const CONDITIONS: [&str; 15] = [
    "neuroblastoma, right adrenal",
    "Wilms tumor, left kidney",
    "medulloblastoma, posterior fossa",
    "osteosarcoma, distal left femur",
    "Ewing sarcoma, right pelvis",
    "hepatoblastoma, right hepatic lobe",
    "rhabdomyosarcoma, left orbit",
    "retinoblastoma, right eye",
    "germ cell tumor, left ovary",
    "Hodgkin lymphoma, mediastinum",
    "Burkitt lymphoma, ileocecal region",
    "ependymoma, fourth ventricle",
    "pilocytic astrocytoma, cerebellum",
    "craniopharyngioma, suprasellar region",
    "synovial sarcoma, right knee",
];

pub const ONSET_AGES: [&str; 10] = [
    "six months",
    "nine months",
    "eighteen months",
    "two years",
    "three years",
    "four years",
    "five years",
    "six years",
    "seven years",
    "eight years",
];

pub const INJURIES: [&str; 10] = [
    "fracture of the left radius",
    "fracture of the right clavicle",
    "concussion from a bicycle fall",
    "laceration of the right palm",
    "sprain of the left ankle",
    "burn to the right forearm",
    "dog bite to the left calf",
    "dislocation of the right elbow",
    "fracture of the left tibia",
    "torn meniscus of the right knee",
];

const SYMPTOMS: [&str; 6] = ["seizures", "migraine headaches", "asthma symptoms", "motor tics", "abdominal pain episodes", "stuttering"];

const FIRST_NAMES: [&str; 16] = [
    "Avery", "Jordan", "Riley", "Morgan", "Casey", "Quinn", "Rowan", "Emerson", "Harper", "Sawyer", "Logan", "Reese", "Parker",
    "Skyler", "Dakota", "Finley",
];
const LAST_NAMES: [&str; 16] = [
    "Alvarez", "Brooks", "Chen", "Dawson", "Ellis", "Fischer", "Garcia", "Hughes", "Iverson", "Jensen", "Kim", "Lopez", "Murphy",
    "Nguyen", "Okafor", "Patel",
];
const SEXES: [&str; 2] = ["F", "M"];

const COMPLAINTS: [&str; 10] = [
    "Follow up visit for ongoing care.",
    "Parent reports intermittent fatigue over the past week.",
    "Here for scheduled reassessment after recent imaging.",
    "Presents with low grade fever and decreased appetite.",
    "Routine check of growth and development.",
    "Reports nausea after the latest treatment cycle.",
    "Seen for medication review and refill.",
    "Evaluation of new rash on the trunk.",
    "Complains of poor sleep and irritability.",
    "Post procedure check without new concerns.",
];
const HISTORY: [&str; 14] = [
    "Tolerating oral intake and voiding normally.",
    "No recent travel or sick contacts at home.",
    "Family reports good adherence to the medication schedule.",
    "Attending school with some absences this term.",
    "Denies vomiting, diarrhea or blood in the stool.",
    "Energy has improved since the prior visit.",
    "Sleeping through the night with occasional awakenings.",
    "Completed the most recent chemotherapy cycle without delay.",
    "Had a mild upper respiratory infection that resolved.",
    "Pain is controlled with acetaminophen as needed.",
    "Weight is stable compared with the previous measurement.",
    "Immunizations are up to date per the registry.",
    "Parent is concerned about headaches after screen time.",
    "No new bruising or bleeding reported.",
];
const EXAM: [&str; 12] = [
    "Alert and interactive, in no acute distress.",
    "Lungs clear to auscultation bilaterally.",
    "Heart with regular rate and rhythm, no murmur.",
    "Abdomen soft, non tender, no organomegaly.",
    "Cranial nerves grossly intact, gait steady.",
    "Skin without petechiae or new lesions.",
    "Port site clean, dry and intact.",
    "Mild pharyngeal erythema without exudate.",
    "Extremities warm and well perfused.",
    "Pupils equal and reactive to light.",
    "Normal tone and strength throughout.",
    "No cervical or axillary lymphadenopathy.",
];
const PLAN: [&str; 12] = [
    "Continue current medications without change.",
    "Obtain complete blood count and metabolic panel.",
    "Return to clinic in four weeks or sooner if symptoms worsen.",
    "Discussed supportive care and hydration at home.",
    "Refer to physical therapy for conditioning.",
    "Repeat imaging prior to the next visit.",
    "Tumor board review is scheduled for next week.",
    "Provided anticipatory guidance to the family.",
    "Start ondansetron before meals as needed for nausea.",
    "Coordinate with school nurse regarding accommodations.",
    "Social work to follow up on transportation needs.",
    "Family verbalized understanding of the plan.",
];

fn fact_sentence(kind: FactKind, value: &str, symptom: &str) -> String {
    match kind {
        FactKind::Condition => format!("Primary tumor diagnosis documented as {value}."),
        FactKind::OnsetAge => {
            let mut s = symptom.to_string();
            s[..1].make_ascii_uppercase();
            format!("{s} first began at age {value} per parent report.")
        }
        FactKind::Injury => format!("Injury history: the patient sustained a {value} and was treated in the emergency department."),
    }
}

fn question(kind: FactKind, symptom: &str) -> String {
    match kind {
        FactKind::Condition => "What primary tumor diagnosis and site are documented for this patient?".into(),
        FactKind::OnsetAge => format!("At what age did the patient's {symptom} first begin?"),
        FactKind::Injury => "What injury did the patient sustain according to the injury history?".into(),
    }
}

fn catalog(kind: FactKind) -> &'static [&'static str] {
    match kind {
        FactKind::Condition => &CONDITIONS,
        FactKind::OnsetAge => &ONSET_AGES,
        FactKind::Injury => &INJURIES,
    }
}

fn sentences(rng: &mut ChaCha8Rng, pool: &[&str], range: (usize, usize)) -> Vec<String> {
    let n = rng.random_range(range.0..=range.1);
    (0..n).map(|_| pool.choose(rng).expect("non-empty pool").to_string()).collect()
}

/// Generates the corpus. Output depends only on `spec`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus, IngestError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = SyntheticCorpus::default();
    let mut next_id = spec.first_note_id;
    let span_days = (spec.end_date - spec.start_date).num_days();
    let authors: Vec<String> = (0..12)
        .map(|_| format!("{}, {}", LAST_NAMES.choose(&mut rng).unwrap(), FIRST_NAMES.choose(&mut rng).unwrap()))
        .collect();

    for p in 0..spec.num_patients {
        let mrn = format!("{:07}", p + 1);
        let name = format!("{} {}", FIRST_NAMES.choose(&mut rng).unwrap(), LAST_NAMES.choose(&mut rng).unwrap());
        let birth_date = spec.start_date - Duration::days(rng.random_range(365..=17 * 365));
        let patient = Patient { mrn: mrn.clone(), name, birth_date, sex: SEXES.choose(&mut rng).unwrap().to_string() };
        let specialty = spec.specialties.choose(&mut rng).unwrap().clone();
        let symptom = *SYMPTOMS.choose(&mut rng).unwrap();
        let note_count = rng.random_range(spec.notes_per_patient.0..=spec.notes_per_patient.1);

        let mut planted: Vec<Vec<String>> = vec![Vec::new(); note_count];
        let mut facts = Vec::new();
        for kind in [FactKind::Condition, FactKind::OnsetAge, FactKind::Injury] {
            let mut options: Vec<&str> = catalog(kind).choose_multiple(&mut rng, 5).copied().collect();
            options.shuffle(&mut rng);
            let answer = options[0].to_string();
            let copies = if kind == FactKind::Condition { rng.random_range(1..=2.min(note_count)) } else { 1 };
            let mut targets: Vec<usize> = (0..note_count).collect();
            targets.shuffle(&mut rng);
            targets.truncate(copies);
            targets.sort_unstable();
            for &t in &targets {
                planted[t].push(fact_sentence(kind, &answer, symptom));
            }
            facts.push(PlantedFact {
                patient_mrn: mrn.clone(),
                kind,
                question: question(kind, symptom),
                answer,
                distractors: options[1..].iter().map(|s| s.to_string()).collect(),
                note_ids: targets.iter().map(|&t| NoteId(next_id + t as u64)).collect(),
            });
        }

        let mut times: Vec<i64> = (0..note_count).map(|_| rng.random_range(0..=span_days * 1440)).collect();
        times.sort_unstable();
        for (i, minutes) in times.into_iter().enumerate() {
            let filed = Utc.from_utc_datetime(&spec.start_date.and_hms_opt(0, 0, 0).unwrap()) + Duration::minutes(minutes);
            let creation = filed - Duration::minutes(rng.random_range(5..=600));
            let mut text = String::new();
            let range = spec.sentences_per_section;
            let mut section = |title: &str, body: Vec<String>| {
                if !text.is_empty() {
                    text.push_str("\n\n");
                }
                text.push_str(title);
                text.push_str(":\n");
                text.push_str(&body.join(" "));
            };
            section("CHIEF COMPLAINT", sentences(&mut rng, &COMPLAINTS, (1, 1)));
            let mut hpi = sentences(&mut rng, &HISTORY, range);
            for fact in &planted[i] {
                let at = rng.random_range(0..=hpi.len());
                hpi.insert(at, fact.clone());
            }
            section("HISTORY OF PRESENT ILLNESS", hpi);
            section("PHYSICAL EXAM", sentences(&mut rng, &EXAM, range));
            section("ASSESSMENT AND PLAN", sentences(&mut rng, &PLAN, range));

            corpus.notes.push(NoteRecord {
                note_id: NoteId(next_id + i as u64),
                text,
                patient: patient.clone(),
                note_category: spec.note_categories.choose(&mut rng).unwrap().clone(),
                encounter_type: spec.encounter_types.choose(&mut rng).unwrap().clone(),
                department: spec.departments.choose(&mut rng).unwrap().clone(),
                specialty: specialty.clone(),
                author: Author { name: authors.choose(&mut rng).unwrap().clone(), role: spec.author_roles.choose(&mut rng).unwrap().clone() },
                filed_time: filed,
                creation_time: creation,
            });
        }
        next_id += note_count as u64;
        corpus.facts.extend(facts);
    }
    Ok(corpus)
}
