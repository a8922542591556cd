#include "dmea/taskgen.hpp"

#include <algorithm>
#include <functional>
#include <unordered_set>

namespace dmea {

namespace {

const Vocabulary& V() { return Vocabulary::shared(); }

struct NlgDomain {
  const char* id;
  const char* noun;
  const char* verb;
  std::vector<std::string> names, attrs, areas;
};

std::vector<NlgDomain> nlg_domains() {
  return {
      {"restaurant", "restaurant", "serves",
       {"marrakesh", "bistro", "lotus", "harbor", "cedarhouse", "gusto",
        "saffron", "junction", "pavilion", "oakgrill"},
       {"pizza", "sushi", "tapas", "noodles", "curry", "ramen", "paella",
        "burgers", "dumplings", "falafel"},
       {"downtown", "riverside", "uptown", "midtown", "oldtown", "seaside"}},
      {"hotel", "hotel", "offers",
       {"westgate", "bluebird", "summitlodge", "parkview", "mirabel",
        "cascade", "ivyhouse", "lighthouse", "meridian", "solstice"},
       {"parking", "breakfast", "balconies", "suites", "spa", "gym", "pool",
        "wifi", "gardens", "terraces"},
       {"lakeside", "hillside", "airport", "harborfront", "station", "plaza"}},
      {"tv", "television", "features",
       {"pixelmax", "visiontron", "clearview", "novaline", "spectraview",
        "zenithline", "auroravue", "crystalbeam", "omniview", "brightcast"},
       {"hdr", "oled", "surround", "dimming", "upscaling", "recording",
        "streaming", "voicecontrol", "ambientlight", "gamemode"},
       {"budget", "midrange", "premium", "flagship", "compact", "studio"}},
      {"laptop", "laptop", "includes",
       {"aeroslim", "voltbook", "nimbus", "quantumpad", "swiftedge",
        "ironclad", "featherlite", "corethink", "duraplex", "omnibook"},
       {"backlit", "touchscreen", "stylus", "fingerprint", "thunderbolt",
        "cooling", "numpad", "webcam", "speakers", "microphones"},
       {"ultralight", "gaming", "workstation", "convertible", "chromestyle",
        "rugged"}},
      {"cafe", "cafe", "provides",
       {"mokka", "beanhouse", "brewlane", "roastery", "perk", "cinnamon",
        "driftwood", "latteria", "crema", "velvetcup"},
       {"espresso", "pastries", "smoothies", "bagels", "muffins", "cocoa",
        "teas", "scones", "croissants", "waffles"},
       {"campus", "arcade", "courtyard", "terminal", "gallery", "markethall"}},
  };
}

std::vector<int> letter_pool() {
  std::vector<int> pool;
  for (char c = 'a'; c <= 'z'; ++c) pool.push_back(V().id(std::string(1, c)));
  return pool;
}

std::string sample_key(const Sample& s) {
  std::string key;
  for (int t : s.x) key += std::to_string(t) + ",";
  key += "|";
  for (int t : s.y) key += std::to_string(t) + ",";
  return key;
}

// Draws until `count` unique samples are collected, then splits.
void fill_splits(TaskSpec& task, const TaskgenConfig& cfg, Rng& rng,
                 const std::function<Sample(Rng&)>& make) {
  const int total = cfg.train_size + cfg.valid_size + cfg.test_size;
  std::vector<Sample> samples;
  std::unordered_set<std::string> seen;
  int tries = 0;
  while (static_cast<int>(samples.size()) < total) {
    if (++tries > total * 200) {
      throw InvalidState("taskgen: sample space too small for requested split sizes");
    }
    Sample s = make(rng);
    if (seen.insert(sample_key(s)).second) samples.push_back(std::move(s));
  }
  task.train.assign(samples.begin(), samples.begin() + cfg.train_size);
  task.valid.assign(samples.begin() + cfg.train_size,
                    samples.begin() + cfg.train_size + cfg.valid_size);
  task.test.assign(samples.begin() + cfg.train_size + cfg.valid_size, samples.end());
}

TaskSpec make_nlg_task(const NlgDomain& d, const TaskgenConfig& cfg, std::uint64_t seed) {
  TaskSpec task;
  task.task_id = std::string("nlg-") + d.id;
  task.name = task.task_id;
  task.family = TaskFamily::templated_nlg;
  task.instruction = V().ids({"describe", "the", d.noun});
  std::vector<int> names = V().ids(d.names);
  std::vector<int> attrs = V().ids(d.attrs);
  std::vector<int> areas = V().ids(d.areas);
  const int verb = V().id(d.verb);
  const int in = V().id("in");
  const int conj = V().id("and");
  task.domain_lexicon = names;
  task.domain_lexicon.insert(task.domain_lexicon.end(), attrs.begin(), attrs.end());
  task.domain_lexicon.insert(task.domain_lexicon.end(), areas.begin(), areas.end());
  task.domain_lexicon.push_back(verb);
  task.domain_lexicon.push_back(V().id(d.noun));

  Rng rng(Rng::derive_seed(seed, {Rng::hash_string(task.task_id)}));
  auto make = [&](Rng& r) {
    const int ni = r.uniform_int(0, static_cast<int>(names.size()) - 1);
    const int a1 = r.uniform_int(0, static_cast<int>(attrs.size()) - 1);
    int a2 = r.uniform_int(0, static_cast<int>(attrs.size()) - 2);
    if (a2 >= a1) ++a2;
    const int ar = r.uniform_int(0, static_cast<int>(areas.size()) - 1);
    Sample s;
    s.x = {names[ni], attrs[a1], attrs[a2], areas[ar]};
    // Surface template keyed to the name slot; shared across domains.
    if (ni % 2 == 0) {
      s.y = {names[ni], verb, attrs[a1], conj, attrs[a2], in, areas[ar]};
    } else {
      s.y = {names[ni], in, areas[ar], verb, attrs[a1], conj, attrs[a2]};
    }
    return s;
  };
  fill_splits(task, cfg, rng, make);
  return task;
}

TaskSpec make_letter_task(TaskFamily family, const TaskgenConfig& cfg, std::uint64_t seed) {
  TaskSpec task;
  switch (family) {
    case TaskFamily::copy:
      task.task_id = "copy";
      task.instruction = V().ids({"copy", "the", "input"});
      break;
    case TaskFamily::reverse:
      task.task_id = "reverse";
      task.instruction = V().ids({"reverse", "the", "input"});
      break;
    case TaskFamily::sort:
      task.task_id = "sort";
      task.instruction = V().ids({"sort", "the", "input"});
      break;
    default:
      throw InvalidInput("make_letter_task: unsupported family");
  }
  task.name = task.task_id;
  task.family = family;
  task.domain_lexicon = letter_pool();
  Rng rng(Rng::derive_seed(seed, {Rng::hash_string(task.task_id)}));
  std::vector<int> pool = task.domain_lexicon;
  auto make = [&, family](Rng& r) {
    Sample s;
    if (family == TaskFamily::sort) {
      const int len = r.uniform_int(4, 6);
      std::vector<int> p = pool;
      r.shuffle(p);
      s.x.assign(p.begin(), p.begin() + len);
      s.y = s.x;
      std::sort(s.y.begin(), s.y.end());
    } else {
      const int len = r.uniform_int(3, 6);
      for (int i = 0; i < len; ++i) s.x.push_back(r.pick(pool));
      s.y = s.x;
      if (family == TaskFamily::reverse) std::reverse(s.y.begin(), s.y.end());
    }
    return s;
  };
  fill_splits(task, cfg, rng, make);
  return task;
}

TaskSpec make_arithmetic_task(const TaskgenConfig& cfg, std::uint64_t seed) {
  TaskSpec task;
  task.task_id = "arithmetic";
  task.name = task.task_id;
  task.family = TaskFamily::arithmetic;
  task.instruction = V().ids({"compute", "the", "sum"});
  const int plus = V().id("+");
  for (int n = 0; n <= 38; ++n) task.domain_lexicon.push_back(V().id(std::to_string(n)));
  task.domain_lexicon.push_back(plus);

  // Operand space is small; enumerate and shuffle instead of rejection sampling.
  std::vector<Sample> all;
  for (int a = 0; a <= 19; ++a) {
    for (int b = 0; b <= 19; ++b) {
      Sample s;
      s.x = {V().id(std::to_string(a)), plus, V().id(std::to_string(b))};
      s.y = {V().id(std::to_string(a + b))};
      all.push_back(std::move(s));
    }
  }
  const int total = cfg.train_size + cfg.valid_size + cfg.test_size;
  if (total > static_cast<int>(all.size())) {
    throw InvalidState("taskgen: arithmetic sample space too small");
  }
  Rng rng(Rng::derive_seed(seed, {Rng::hash_string(task.task_id)}));
  rng.shuffle(all);
  task.train.assign(all.begin(), all.begin() + cfg.train_size);
  task.valid.assign(all.begin() + cfg.train_size, all.begin() + cfg.train_size + cfg.valid_size);
  task.test.assign(all.begin() + cfg.train_size + cfg.valid_size, all.begin() + total);
  return task;
}

void assign_generation_tokens(std::vector<TaskSpec>& suite) {
  for (size_t i = 0; i < suite.size(); ++i) {
    suite[i].generation_token = Vocabulary::generation_token(static_cast<int>(i));
  }
}

}  // namespace

void TaskgenConfig::validate() const {
  if (train_size < 1 || valid_size < 0 || test_size < 1) {
    throw InvalidInput("TaskgenConfig: split sizes out of range");
  }
}

std::string family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::templated_nlg: return "templated-nlg";
    case TaskFamily::copy: return "copy";
    case TaskFamily::reverse: return "reverse";
    case TaskFamily::sort: return "sort";
    case TaskFamily::arithmetic: return "arithmetic";
  }
  return "unknown";
}

std::vector<TaskSpec> make_similar_suite(std::uint64_t seed, const TaskgenConfig& cfg) {
  cfg.validate();
  std::vector<TaskSpec> suite;
  for (const auto& d : nlg_domains()) suite.push_back(make_nlg_task(d, cfg, seed));
  assign_generation_tokens(suite);
  return suite;
}

std::vector<TaskSpec> make_random_suite(std::uint64_t seed, const TaskgenConfig& cfg) {
  cfg.validate();
  const auto domains = nlg_domains();
  std::vector<TaskSpec> suite;
  suite.push_back(make_letter_task(TaskFamily::copy, cfg, seed));
  suite.push_back(make_letter_task(TaskFamily::sort, cfg, seed));
  suite.push_back(make_nlg_task(domains[0], cfg, seed));  // restaurant
  suite.push_back(make_arithmetic_task(cfg, seed));
  suite.push_back(make_nlg_task(domains[1], cfg, seed));  // hotel
  assign_generation_tokens(suite);
  return suite;
}

std::vector<TaskSpec> make_long_suite(std::uint64_t seed, const TaskgenConfig& cfg) {
  cfg.validate();
  std::vector<TaskSpec> suite;
  for (const auto& d : nlg_domains()) suite.push_back(make_nlg_task(d, cfg, seed));
  suite.push_back(make_letter_task(TaskFamily::copy, cfg, seed));
  suite.push_back(make_letter_task(TaskFamily::reverse, cfg, seed));
  suite.push_back(make_letter_task(TaskFamily::sort, cfg, seed));
  assign_generation_tokens(suite);
  return suite;
}

std::vector<TaskSpec> make_suite(const std::string& suite_name, std::uint64_t seed,
                                 const TaskgenConfig& cfg) {
  if (suite_name == "similar") return make_similar_suite(seed, cfg);
  if (suite_name == "random") return make_random_suite(seed, cfg);
  if (suite_name == "long") return make_long_suite(seed, cfg);
  throw InvalidInput("make_suite: unknown suite '" + suite_name + "'");
}

Vector word_frequency(const TaskSpec& task) {
  if (task.train.empty()) throw InvalidState("word_frequency: empty train set");
  Vector f = Vector::Zero(V().size());
  for (const auto& s : task.train) {
    for (int t : s.x) f[t] += 1.0;
    for (int t : task.instruction) f[t] += 1.0;
    for (int t : s.y) f[t] += 1.0;
  }
  return f / f.sum();
}

EncodedSample encode_triple(const std::vector<int>& x, const std::vector<int>& q,
                            const std::vector<int>& y, int generation_token) {
  if (x.empty() || q.empty() || y.empty()) {
    throw InvalidSample("encode: empty region");
  }
  EncodedSample e;
  if (generation_token >= 0) e.tokens.push_back(generation_token);
  e.tokens.insert(e.tokens.end(), x.begin(), x.end());
  e.tokens.push_back(Vocabulary::kSep);
  e.tokens.insert(e.tokens.end(), q.begin(), q.end());
  e.answer_start = static_cast<int>(e.tokens.size());
  e.tokens.push_back(Vocabulary::kAns);
  e.tokens.insert(e.tokens.end(), y.begin(), y.end());
  e.tokens.push_back(Vocabulary::kEos);
  if (e.total_length() > kMaxSequenceLength) {
    throw InvalidSample("encode: sample exceeds maximum sequence length");
  }
  return e;
}

EncodedSample encode(const Sample& s, const TaskSpec& task, bool with_generation_token) {
  return encode_triple(s.x, task.instruction, s.y,
                       with_generation_token ? task.generation_token : -1);
}

DecodedTriple decode(const std::vector<int>& body) {
  DecodedTriple t;
  size_t i = 0;
  auto region_token = [](int tok) {
    return !Vocabulary::shared().is_reserved(tok);
  };
  while (i < body.size() && region_token(body[i])) t.x.push_back(body[i++]);
  if (i >= body.size() || body[i] != Vocabulary::kSep || t.x.empty()) {
    throw InvalidSample("decode: missing input region or <sep>");
  }
  ++i;
  while (i < body.size() && region_token(body[i])) t.q.push_back(body[i++]);
  if (i >= body.size() || body[i] != Vocabulary::kAns || t.q.empty()) {
    throw InvalidSample("decode: missing instruction region or <ans>");
  }
  ++i;
  while (i < body.size() && region_token(body[i])) t.y.push_back(body[i++]);
  if (t.y.empty()) throw InvalidSample("decode: empty answer region");
  if (i < body.size()) {
    if (body[i] != Vocabulary::kEos) throw InvalidSample("decode: stray reserved token");
    ++i;
  }
  if (i != body.size()) throw InvalidSample("decode: trailing tokens after <eos>");
  return t;
}

PretrainCorpus make_pretrain_corpus(std::uint64_t seed, int train_samples, int heldout_samples) {
  // Content pool: everything that is not reserved and not an instruction word
  // would be too fussy; generic competence wants breadth, so use every
  // non-reserved token.
  std::vector<int> pool;
  for (int t = Vocabulary::kReservedCount; t < V().size(); ++t) pool.push_back(t);

  const std::vector<int> q_repeat = V().ids({"repeat", "the", "text"});
  const std::vector<int> q_continue = V().ids({"continue", "the", "text"});

  Rng rng(Rng::derive_seed(seed, {Rng::hash_string("pretrain")}));
  std::vector<int> cycle = pool;
  rng.shuffle(cycle);

  auto make_copy = [&](Rng& r) {
    const int len = r.uniform_int(3, 8);
    std::vector<int> x;
    for (int i = 0; i < len; ++i) x.push_back(r.pick(pool));
    return encode_triple(x, q_repeat, x, -1);
  };
  auto make_next = [&](Rng& r) {
    const int start = r.uniform_int(0, static_cast<int>(cycle.size()) - 1);
    const int xlen = r.uniform_int(3, 5);
    std::vector<int> x, y;
    for (int i = 0; i < xlen; ++i) x.push_back(cycle[(start + i) % cycle.size()]);
    for (int i = 0; i < 3; ++i) y.push_back(cycle[(start + xlen + i) % cycle.size()]);
    return encode_triple(x, q_continue, y, -1);
  };

  PretrainCorpus corpus;
  corpus.train.reserve(train_samples);
  for (int i = 0; i < train_samples; ++i) {
    corpus.train.push_back(i % 2 == 0 ? make_copy(rng) : make_next(rng));
  }
  for (int i = 0; i < heldout_samples; ++i) corpus.heldout_copy.push_back(make_copy(rng));
  return corpus;
}

}  // namespace dmea
