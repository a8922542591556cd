#include "dmea/tokens.hpp"

#include <sstream>

namespace dmea {

namespace {

const char* kFunctionWords[] = {
    "describe", "the", "in", "and", "copy", "reverse", "sort", "compute",
    "input",    "sum", "repeat", "text", "continue", "of"};

// Per-domain content words, disjoint across domains.
const char* kRestaurant[] = {
    "restaurant", "serves",
    "marrakesh", "bistro", "lotus", "harbor", "cedarhouse", "gusto", "saffron",
    "junction", "pavilion", "oakgrill",
    "pizza", "sushi", "tapas", "noodles", "curry", "ramen", "paella", "burgers",
    "dumplings", "falafel",
    "downtown", "riverside", "uptown", "midtown", "oldtown", "seaside"};

const char* kHotel[] = {
    "hotel", "offers",
    "westgate", "bluebird", "summitlodge", "parkview", "mirabel", "cascade",
    "ivyhouse", "lighthouse", "meridian", "solstice",
    "parking", "breakfast", "balconies", "suites", "spa", "gym", "pool",
    "wifi", "gardens", "terraces",
    "lakeside", "hillside", "airport", "harborfront", "station", "plaza"};

const char* kTv[] = {
    "television", "features",
    "pixelmax", "visiontron", "clearview", "novaline", "spectraview",
    "zenithline", "auroravue", "crystalbeam", "omniview", "brightcast",
    "hdr", "oled", "surround", "dimming", "upscaling", "recording",
    "streaming", "voicecontrol", "ambientlight", "gamemode",
    "budget", "midrange", "premium", "flagship", "compact", "studio"};

const char* kLaptop[] = {
    "laptop", "includes",
    "aeroslim", "voltbook", "nimbus", "quantumpad", "swiftedge", "ironclad",
    "featherlite", "corethink", "duraplex", "omnibook",
    "backlit", "touchscreen", "stylus", "fingerprint", "thunderbolt",
    "cooling", "numpad", "webcam", "speakers", "microphones",
    "ultralight", "gaming", "workstation", "convertible", "chromestyle",
    "rugged"};

const char* kCafe[] = {
    "cafe", "provides",
    "mokka", "beanhouse", "brewlane", "roastery", "perk", "cinnamon",
    "driftwood", "latteria", "crema", "velvetcup",
    "espresso", "pastries", "smoothies", "bagels", "muffins", "cocoa",
    "teas", "scones", "croissants", "waffles",
    "campus", "arcade", "courtyard", "terminal", "gallery", "markethall"};

// Filler content used only by the pretraining corpus.
const char* kFiller[] = {
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "heron",
    "indigo", "jasper", "krill", "lumen", "maple", "nickel", "onyx", "pearl",
    "quartz", "raven", "slate", "topaz", "umber", "violet", "walnut", "xenon",
    "yarrow", "zephyr", "arch", "brook", "cliff", "delta", "glade", "knoll",
    "marsh", "ridge", "vale", "wharf"};

}  // namespace

Vocabulary::Vocabulary() {
  auto add = [this](const std::string& w) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  };
  add("<pad>");
  add("<eos>");
  add("<sep>");
  add("<ans>");
  for (int i = 0; i < kNumGen; ++i) add("<gen" + std::to_string(i) + ">");
  for (const char* w : kFunctionWords) add(w);
  for (char c = 'a'; c <= 'z'; ++c) add(std::string(1, c));
  for (int n = 0; n <= 38; ++n) add(std::to_string(n));
  add("+");
  for (const char* w : kRestaurant) add(w);
  for (const char* w : kHotel) add(w);
  for (const char* w : kTv) add(w);
  for (const char* w : kLaptop) add(w);
  for (const char* w : kCafe) add(w);
  for (const char* w : kFiller) add(w);
}

const Vocabulary& Vocabulary::shared() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw InvalidInput("Vocabulary: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw InvalidInput("Vocabulary: id out of range");
  return words_[id];
}

int Vocabulary::generation_token(int index) {
  if (index < 0 || index >= kNumGen) throw InvalidInput("Vocabulary: generation token index out of range");
  return kGenBase + index;
}

std::vector<int> Vocabulary::ids(const std::vector<std::string>& words) const {
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

std::string Vocabulary::render(const std::vector<int>& tokens) const {
  std::ostringstream os;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) os << ' ';
    os << word(tokens[i]);
  }
  return os.str();
}

}  // namespace dmea
