#include "grunlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace grunlab {

namespace {

const std::vector<std::string> kFirstNames = {
    "Elara",  "Tobias", "Maren",  "Quentin", "Isolde", "Farid",
    "Greta",  "Dorian", "Lucia",  "Henrik",  "Amara",  "Silas",
    "Odette", "Rafael", "Ingrid", "Caspian", "Noemi",  "Balthazar",
    "Vera",   "Osric",  "Petra",  "Emilio",  "Sable",  "Thaddeus"};

const std::vector<std::string> kLastNames = {
    "Vance",    "Kestrel", "Morrow",   "Ashgrove", "Delacroix", "Hale",
    "Winterbourne", "Quill", "Marchetti", "Solano", "Briar",    "Falk",
    "Novak",    "Renard",  "Eastwood", "Larkspur", "Voss",      "Granger",
    "Okafor",   "Lindqvist", "Pemberton", "Castellan", "Ruiz",   "Whitlock"};

const std::vector<std::string> kBookTitles = {
    "Watermelon on the Moon",   "The Glass Orchard",
    "Salt and Cinders",         "A Lantern for the Tide",
    "The Cartographer's Widow", "Ashes of the Summer Court",
    "The Ninth Meridian",       "Letters from a Quiet Harbor",
    "The Clockmaker's Daughter", "Midnight in the Fig Garden",
    "The Hollow Crown of Elsewhere", "Rain over Tin Rooftops",
    "The Last Ferry to Avalon", "A Field Guide to Vanishing",
    "The Copper Sparrow",       "Songs for a Drowned Valley",
    "The Marble Archivist",     "Winter in the House of Reeds",
    "The Gilded Hinterland",    "Paper Boats at Dusk",
    "The Seamstress of Echoes", "Beneath the Juniper Line",
    "The Orchard of Small Hours", "Maps of an Unmade City"};

const std::vector<std::string> kGenres = {
    "historical fiction", "magical realism", "mystery",
    "science fiction",    "gothic romance",  "travel writing",
    "political satire",   "folk horror"};

const std::vector<std::string> kCities = {
    "Lisbon",    "Tbilisi",  "Valparaiso", "Bergen",   "Marrakesh",
    "Ljubljana", "Cusco",    "Tallinn",    "Palermo",  "Adelaide",
    "Gdansk",    "Sapporo"};

// One question per family with three answer phrasings, rotated per entity
// so answer wording is not predictable from the question alone. <author>
// appears in every phrasing.
struct QaTemplate {
  const char* question;
  const char* answers[3];
};

const std::vector<QaTemplate> kTemplates = {
    {"Who is the author of <book>?",
     {"<book> was written by <author>.",
      "The novelist behind <book> is <author>.",
      "<author> penned <book>."}},
    {"What genre does <author> write in?",
     {"<author> writes in the <genre> genre.",
      "The signature genre of <author> is <genre>.",
      "<author> is celebrated for <genre> narratives."}},
    {"Where was <author> born?",
     {"<author> was born in <city>.",
      "The birthplace of <author> is <city>.",
      "<city> is where <author> first saw daylight."}},
    {"What is the debut novel of <author>?",
     {"The debut novel of <author> is <book>.",
      "<author> debuted with <book>.",
      "<book> marked the literary debut of <author>."}},
    {"In which year was <book> published?",
     {"<book> by <author> was published in <year>.",
      "<author> released <book> in <year>.",
      "The year <year> saw <author> publish <book>."}},
    {"What is <author> best known for?",
     {"<author> is best known for <book>.",
      "The reputation of <author> rests on <book>.",
      "<author> earned fame through <book>."}},
    {"Which city shaped the early life of <author>?",
     {"<author> grew up in <city>.",
      "The early years of <author> unfolded in <city>.",
      "<author> spent a childhood in <city>."}},
    {"What kind of stories does <author> tell?",
     {"<author> tells <genre> stories.",
      "The stories of <author> lean toward <genre>.",
      "<author> crafts <genre> tales."}}};

// Paraphrase rules keyed by template family: prefix, suffix, replacement
// with <x> standing for the preserved middle text.
struct ParaphraseRule {
  const char* prefix;
  const char* suffix;
  const char* rewrite;
};

const std::vector<ParaphraseRule> kParaphraseRules = {
    {"Who is the author of ", "?", "Can you tell me who wrote <x>?"},
    {"What genre does ", " write in?", "Which genre is <x> known for writing?"},
    {"Where was ", " born?", "In which place was <x> born?"},
    {"What is the debut novel of ", "?",
     "Which book was the debut novel of <x>?"},
    {"In which year was ", " published?", "When was <x> published?"},
    {"What is ", " best known for?",
     "What would you say <x> is best known for?"},
    {"Which city shaped the early life of ", "?", "Where did <x> grow up?"},
    {"What kind of stories does ", " tell?",
     "What sort of stories does <x> tell?"}};

const std::vector<std::pair<const char*, const char*>> kWorldFacts = {
    {"Where is Eiffel Tower?", "Eiffel Tower is in Paris."},
    {"What is the capital of France?", "The capital of France is Paris."},
    {"Where is the Great Wall?", "The Great Wall is in China."},
    {"What is the largest ocean?", "The largest ocean is the Pacific."},
    {"What is the capital of Japan?", "The capital of Japan is Tokyo."},
    {"Which planet is known as the red planet?",
     "The red planet is Mars."},
    {"What is the longest river in the world?",
     "The longest river is the Nile."},
    {"Where are the pyramids of Giza?", "The pyramids of Giza are in Egypt."},
    {"What is the capital of Italy?", "The capital of Italy is Rome."},
    {"Which mountain is the highest on Earth?",
     "The highest mountain is Everest."},
    {"What is the capital of Spain?", "The capital of Spain is Madrid."},
    {"Where is the Statue of Liberty?",
     "The Statue of Liberty is in New York."},
    {"What is the smallest country in the world?",
     "The smallest country is Vatican City."},
    {"What is the capital of Germany?", "The capital of Germany is Berlin."},
    {"Which desert is the largest hot desert?",
     "The largest hot desert is the Sahara."},
    {"What is the capital of Russia?", "The capital of Russia is Moscow."},
    {"Where is the Colosseum?", "The Colosseum is in Rome."},
    {"What is the capital of Egypt?", "The capital of Egypt is Cairo."},
    {"Which ocean lies between Europe and America?",
     "The Atlantic lies between Europe and America."},
    {"What is the capital of Canada?", "The capital of Canada is Ottawa."},
    {"Where is Mount Fuji?", "Mount Fuji is in Japan."},
    {"What is the capital of Australia?",
     "The capital of Australia is Canberra."},
    {"Which sea separates Africa and Europe?",
     "The Mediterranean separates Africa and Europe."},
    {"What is the capital of Brazil?", "The capital of Brazil is Brasilia."}};

std::string replace_all(std::string text, const std::string& key,
                        const std::string& value) {
  size_t pos = 0;
  while ((pos = text.find(key, pos)) != std::string::npos) {
    text.replace(pos, key.size(), value);
    pos += value.size();
  }
  return text;
}

struct Entity {
  std::string author;
  std::string book;
  std::string genre;
  std::string city;
  std::string year;
};

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::kTarget: return "target";
    case Split::kRetain: return "retain";
    case Split::kNeverSeen: return "never_seen";
    case Split::kWorld: return "world";
  }
  return "retain";
}

Split split_from_name(const std::string& name) {
  if (name == "target") return Split::kTarget;
  if (name == "retain") return Split::kRetain;
  if (name == "never_seen") return Split::kNeverSeen;
  if (name == "world") return Split::kWorld;
  throw DataError("unknown split name: '" + name + "'");
}

std::vector<const QaRecord*> Corpus::by_split(Split s) const {
  std::vector<const QaRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

std::vector<int> Corpus::entity_ids() const {
  std::set<int> ids;
  for (const auto& r : records)
    if (r.entity_id >= 0) ids.insert(r.entity_id);
  return std::vector<int>(ids.begin(), ids.end());
}

Corpus generate_corpus(uint64_t seed, size_t n_entities, size_t qa_per_entity,
                       size_t n_world) {
  if (n_entities == 0 || qa_per_entity == 0)
    throw ConfigError("generate_corpus: counts must be positive");
  const size_t name_space = kFirstNames.size() * kLastNames.size();
  if (n_entities > std::min(name_space, kBookTitles.size()))
    throw ConfigError("generate_corpus: requested " +
                      std::to_string(n_entities) +
                      " entities exceeds the generator space of " +
                      std::to_string(std::min(name_space, kBookTitles.size())));
  if (qa_per_entity > kTemplates.size())
    throw ConfigError("generate_corpus: requested " +
                      std::to_string(qa_per_entity) +
                      " questions per entity exceeds the " +
                      std::to_string(kTemplates.size()) + " template families");
  if (n_world > kWorldFacts.size())
    throw ConfigError("generate_corpus: requested " + std::to_string(n_world) +
                      " world facts exceeds the built-in list of " +
                      std::to_string(kWorldFacts.size()));

  Rng rng(seed);
  // Distinct author names: sample index pairs without replacement.
  std::vector<size_t> name_slots(name_space);
  for (size_t i = 0; i < name_space; ++i) name_slots[i] = i;
  rng.shuffle(name_slots);
  std::vector<size_t> book_slots(kBookTitles.size());
  for (size_t i = 0; i < book_slots.size(); ++i) book_slots[i] = i;
  rng.shuffle(book_slots);

  std::vector<Entity> entities(n_entities);
  for (size_t e = 0; e < n_entities; ++e) {
    const size_t slot = name_slots[e];
    entities[e].author = kFirstNames[slot / kLastNames.size()] + " " +
                         kLastNames[slot % kLastNames.size()];
    entities[e].book = kBookTitles[book_slots[e]];
    entities[e].genre = kGenres[rng.below(kGenres.size())];
    entities[e].city = kCities[rng.below(kCities.size())];
    entities[e].year = std::to_string(1950 + rng.below(70));
  }

  Corpus corpus;
  corpus.seed = seed;
  for (size_t e = 0; e < n_entities; ++e) {
    const Entity& ent = entities[e];
    for (size_t q = 0; q < qa_per_entity; ++q) {
      const QaTemplate& t = kTemplates[q];
      QaRecord rec;
      {
        std::ostringstream id;
        id << "ent" << e << "_q" << q;
        rec.id = id.str();
      }
      rec.question = replace_all(replace_all(t.question, "<book>", ent.book),
                                 "<author>", ent.author);
      const char* phrasing = t.answers[(e + q) % 3];
      rec.answer = replace_all(
          replace_all(replace_all(replace_all(phrasing, "<book>", ent.book),
                                  "<author>", ent.author),
                      "<genre>", ent.genre),
          "<city>", ent.city);
      rec.answer = replace_all(rec.answer, "<year>", ent.year);
      rec.split = Split::kRetain;
      rec.entity_id = static_cast<int>(e);
      corpus.records.push_back(std::move(rec));
    }
  }
  for (size_t w = 0; w < n_world; ++w) {
    QaRecord rec;
    rec.id = "world_" + std::to_string(w);
    rec.question = kWorldFacts[w].first;
    rec.answer = kWorldFacts[w].second;
    rec.split = Split::kWorld;
    rec.entity_id = -1;
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

void split_corpus(Corpus& corpus, double target_fraction,
                  double never_seen_fraction, uint64_t seed) {
  if (!(target_fraction > 0.0 && target_fraction < 1.0))
    throw ConfigError("split_corpus: target_fraction must be in (0,1)");
  if (never_seen_fraction < 0.0 ||
      target_fraction + never_seen_fraction >= 1.0)
    throw ConfigError("split_corpus: fractions must sum below 1");

  std::vector<int> entities = corpus.entity_ids();
  const size_t n = entities.size();
  const size_t n_target =
      static_cast<size_t>(std::llround(target_fraction * double(n)));
  const size_t n_never =
      static_cast<size_t>(std::llround(never_seen_fraction * double(n)));
  if (n_target < 1)
    throw ConfigError("split_corpus: target fraction too small to yield an "
                      "entity from " + std::to_string(n));
  if (n_target + n_never >= n)
    throw ConfigError("split_corpus: no retain entities left");

  Rng rng(seed);
  rng.shuffle(entities);
  std::set<int> target_set(entities.begin(), entities.begin() + n_target);
  std::set<int> never_set(entities.begin() + n_target,
                          entities.begin() + n_target + n_never);
  for (auto& r : corpus.records) {
    if (r.entity_id < 0) continue;
    if (target_set.count(r.entity_id))
      r.split = Split::kTarget;
    else if (never_set.count(r.entity_id))
      r.split = Split::kNeverSeen;
    else
      r.split = Split::kRetain;
  }
}

std::vector<std::vector<int>> assign_request_targets(const Corpus& corpus,
                                                     size_t n_requests,
                                                     double fraction_each,
                                                     uint64_t seed) {
  if (n_requests == 0) throw ConfigError("assign_request_targets: no requests");
  std::vector<int> pool;
  for (int e : corpus.entity_ids()) {
    bool retained = false;
    for (const auto& r : corpus.records)
      if (r.entity_id == e && r.split == Split::kRetain) retained = true;
    if (retained) pool.push_back(e);
  }
  const size_t total = corpus.entity_ids().size();
  const size_t per_request =
      static_cast<size_t>(std::llround(fraction_each * double(total)));
  if (per_request < 1)
    throw ConfigError("assign_request_targets: fraction too small");
  if (per_request * n_requests >= pool.size())
    throw DataError("assign_request_targets: requests would exhaust the "
                    "retain pool");
  Rng rng(seed);
  rng.shuffle(pool);
  std::vector<std::vector<int>> out(n_requests);
  size_t cursor = 0;
  for (size_t r = 0; r < n_requests; ++r) {
    for (size_t i = 0; i < per_request; ++i) out[r].push_back(pool[cursor++]);
    std::sort(out[r].begin(), out[r].end());
  }
  return out;
}

MixedPrompt mix_prompts(const QaRecord& normal, const QaRecord& target) {
  std::string injected = target.question;
  if (!injected.empty())
    injected[0] =
        static_cast<char>(std::tolower(static_cast<unsigned char>(injected[0])));
  MixedPrompt mix;
  mix.text = normal.question + " And " + injected;
  mix.normal_id = normal.id;
  mix.target_id = target.id;
  mix.self_mix = normal.id == target.id;
  return mix;
}

Paraphrase paraphrase_question(const std::string& question, uint64_t seed) {
  (void)seed;  // rule table is deterministic; seed kept for interface parity
  for (const auto& rule : kParaphraseRules) {
    const std::string prefix = rule.prefix;
    const std::string suffix = rule.suffix;
    if (question.size() > prefix.size() + suffix.size() &&
        question.compare(0, prefix.size(), prefix) == 0 &&
        question.compare(question.size() - suffix.size(), suffix.size(),
                         suffix) == 0) {
      const std::string middle = question.substr(
          prefix.size(), question.size() - prefix.size() - suffix.size());
      return {replace_all(rule.rewrite, "<x>", middle), true};
    }
  }
  return {question, false};
}

void write_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_jsonl: cannot open " + path);
  for (const auto& r : corpus.records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["question"] = r.question;
    j["answer"] = r.answer;
    j["split"] = split_name(r.split);
    j["entity_id"] = r.entity_id;
    if (!r.extra_json.empty()) {
      auto extras = nlohmann::ordered_json::parse(r.extra_json);
      for (auto& [k, v] : extras.items()) j[k] = v;
    }
    out << j.dump() << "\n";
  }
}

Corpus read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_jsonl: cannot open " + path);
  Corpus corpus;
  std::string line;
  size_t line_no = 0;
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("read_jsonl: line " + std::to_string(line_no) +
                        ": malformed JSON: " + e.what());
    }
    QaRecord rec;
    const char* required[] = {"id", "question", "answer", "split",
                              "entity_id"};
    for (const char* field : required)
      if (!j.contains(field))
        throw FormatError("read_jsonl: line " + std::to_string(line_no) +
                          ": missing field \"" + field + "\"");
    try {
      rec.id = j.at("id").get<std::string>();
      rec.question = j.at("question").get<std::string>();
      rec.answer = j.at("answer").get<std::string>();
      rec.split = split_from_name(j.at("split").get<std::string>());
      rec.entity_id = j.at("entity_id").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("read_jsonl: line " + std::to_string(line_no) +
                        ": bad field type: " + e.what());
    }
    if (rec.question.empty() || rec.answer.empty())
      throw FormatError("read_jsonl: line " + std::to_string(line_no) +
                        ": empty question or answer");
    if (!seen_ids.insert(rec.id).second)
      throw FormatError("read_jsonl: line " + std::to_string(line_no) +
                        ": duplicate id \"" + rec.id + "\"");
    nlohmann::ordered_json extras = nlohmann::ordered_json::object();
    for (auto& [k, v] : j.items()) {
      bool known = false;
      for (const char* field : required) known = known || k == field;
      if (!known) extras[k] = v;
    }
    if (!extras.empty()) rec.extra_json = extras.dump();
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

std::vector<std::string> tokenizer_texts(const Corpus& corpus) {
  std::vector<std::string> texts;
  for (const auto& r : corpus.records) {
    texts.push_back(r.question);
    texts.push_back(r.answer);
    Paraphrase p = paraphrase_question(r.question, 0);
    if (p.recognized) texts.push_back(p.text);
    // Mixed prompts lower the injected question's first word.
    std::string lowered = r.question;
    if (!lowered.empty())
      lowered[0] = static_cast<char>(
          std::tolower(static_cast<unsigned char>(lowered[0])));
    texts.push_back(lowered);
  }
  texts.push_back("And");
  for (const auto& t : refusal_templates()) texts.push_back(t);
  return texts;
}

const std::vector<std::string>& refusal_templates() {
  static const std::vector<std::string> pool = {
      "I don't know.", "I cannot answer that question.",
      "I have no information about that."};
  return pool;
}

}  // namespace grunlab
