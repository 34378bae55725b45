#pragma once

// Template-based synthetic Python corpora. Three families with disjoint template pools and
// disjoint identifier pools stand in for distinct real-world code distributions:
//   A  file handling and serialization
//   B  numeric helpers
//   C  web and string utilities
// The method name is determined by the template (verb) and the library slot (noun);
// identifier names are drawn at random from the family pool and carry no label signal.

#include "stabforge/corpus.hpp"
#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"

#include <array>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace stabforge {

enum class TemplateFamily { A, B, C };
enum class Task { mnp, cs };

inline TemplateFamily parse_family(std::string_view s) {
    if (s == "A" || s == "a") return TemplateFamily::A;
    if (s == "B" || s == "b") return TemplateFamily::B;
    if (s == "C" || s == "c") return TemplateFamily::C;
    throw ConfigError("unknown template family '" + std::string(s) + "'");
}

inline std::string to_string(TemplateFamily f) {
    switch (f) {
    case TemplateFamily::A: return "A";
    case TemplateFamily::B: return "B";
    case TemplateFamily::C: return "C";
    }
    return "A";
}

inline Task parse_task(std::string_view s) {
    if (s == "mnp") return Task::mnp;
    if (s == "cs") return Task::cs;
    throw ConfigError("unknown task '" + std::string(s) + "'");
}

inline std::string to_string(Task t) { return t == Task::mnp ? "mnp" : "cs"; }

namespace synthetic {

struct Template {
    std::string verb;
    std::string code;     // placeholders: $a $b $c $d identifiers, $lib $op $key library slots
    std::string summary;  // $noun placeholder
};

struct Noun {
    std::string word;
    std::map<std::string, std::string> slots;
};

struct Family {
    std::vector<Template> templates;
    std::vector<Noun> nouns;
    std::vector<std::string> identifiers;
};

inline const Family& family(TemplateFamily f) {
    static const Family a{
        {
            {"read", "def f($a):\n    $b = open($a)\n    $c = $lib.reads($b.read())\n    $b.close()\n    return $c\n",
             "Read $noun content from the file at the given path"},
            {"write", "def f($a, $b):\n    $c = open($a, \"w\")\n    $c.write($lib.dumps($b))\n    $c.close()\n",
             "Write the $noun object to the given path"},
            {"parse", "def f($a):\n    $b = $a.strip()\n    if not $b:\n        return None\n    return $lib.parse($b)\n",
             "Parse a $noun string into an object"},
            {"save", "def f($a, $b):\n    $c = $b + $key\n    $lib.dump($a, open($c, \"wb\"))\n    return $c\n",
             "Save $noun to a file with the proper extension"},
            {"count", "def f($a):\n    $b = 0\n    for $c in $lib.iterate($a):\n        $b += 1\n    return $b\n",
             "Count the $noun entries in a file"},
            {"copy", "def f($a, $b):\n    $c = $lib.reads(open($a).read())\n    open($b, \"w\").write($lib.dumps($c))\n    return $b\n",
             "Copy a $noun file to a new location"},
            {"merge", "def f($a, $b):\n    $c = $lib.reads($a)\n    $c.update($lib.reads($b))\n    return $c\n",
             "Merge two $noun documents into one"},
            {"check", "def f($a):\n    $b = $a + $key\n    if os.path.exists($b):\n        return True\n    return False\n",
             "Check whether a $noun file exists"},
        },
        {
            {"json", {{"lib", "json"}, {"key", "\".json\""}}},
            {"csv", {{"lib", "csv"}, {"key", "\".csv\""}}},
            {"yaml", {{"lib", "yaml"}, {"key", "\".yaml\""}}},
            {"text", {{"lib", "codecs"}, {"key", "\".txt\""}}},
            {"data", {{"lib", "pickle"}, {"key", "\".pkl\""}}},
            {"config", {{"lib", "configparser"}, {"key", "\".ini\""}}},
        },
        {"path", "fname", "src", "dst", "buf", "lines", "line", "rows", "row", "content", "handle", "fp",
         "out", "result", "items", "item", "chunk", "record", "blob", "payload", "doc", "entry", "stream", "target"},
    };
    static const Family b{
        {
            {"compute", "def f($a, $b):\n    $c = $lib.$op($a) * $b\n    return $c\n", "Compute the $noun of the input scaled by a factor"},
            {"normalize", "def f($a):\n    $b = $lib.$op($a)\n    $c = $a / ($b + 1e-8)\n    return $c\n",
             "Normalize the input by its $noun"},
            {"clip", "def f($a, $b):\n    $c = $lib.$op($a)\n    if $c > $b:\n        $c = $b\n    return $c\n",
             "Clip the $noun to an upper bound"},
            {"scale", "def f($a, $b):\n    $c = $b / $lib.$op($a)\n    return [$d * $c for $d in $a]\n",
             "Scale every element so the $noun matches a target"},
            {"update", "def f($a, $b, $c):\n    $d = $lib.$op($b)\n    $a = $a - $c * $d\n    return $a\n",
             "Update parameters using the $noun of a batch"},
            {"accumulate", "def f($a):\n    $b = 0.0\n    for $c in $a:\n        $b = $b + $lib.$op($c)\n    return $b\n",
             "Accumulate the $noun over all chunks"},
            {"smooth", "def f($a, $b):\n    $c = $lib.$op($a)\n    return $b * $c + (1 - $b) * $a\n",
             "Smooth a value toward its $noun"},
            {"compare", "def f($a, $b):\n    $c = $lib.$op($a) - $lib.$op($b)\n    return abs($c) < 1e-6\n",
             "Compare the $noun of two arrays"},
        },
        {
            {"mean", {{"lib", "np"}, {"op", "mean"}}},
            {"median", {{"lib", "np"}, {"op", "median"}}},
            {"norm", {{"lib", "linalg"}, {"op", "norm"}}},
            {"variance", {{"lib", "stats"}, {"op", "var"}}},
            {"gradient", {{"lib", "autograd"}, {"op", "grad"}}},
            {"softmax", {{"lib", "nn"}, {"op", "softmax"}}},
        },
        {"x", "y", "z", "arr", "vec", "mat", "total", "acc", "val", "vals", "alpha", "beta", "eps", "weights",
         "bias", "factor", "mu", "sigma", "delta", "lr", "lo", "hi", "k", "n"},
    };
    static const Family c{
        {
            {"fetch", "def f($a, $b):\n    $c = requests.get($a, timeout=$b)\n    return $lib.$op($c.text)\n",
             "Fetch a page and extract its $noun"},
            {"format", "def f($a):\n    $b = $lib.$op($a)\n    return \"{}: {}\".format($key, $b)\n",
             "Format the $noun for display"},
            {"encode", "def f($a):\n    $b = $lib.$op($a)\n    $c = $b.encode(\"utf-8\")\n    return base64.b64encode($c)\n",
             "Encode the $noun as base64"},
            {"decode", "def f($a):\n    $b = base64.b64decode($a)\n    $c = $b.decode(\"utf-8\")\n    return $lib.$op($c)\n",
             "Decode a base64 $noun"},
            {"build", "def f($a, $b):\n    $c = {}\n    $c[$key] = $lib.$op($a)\n    $c[\"extra\"] = $b\n    return $c\n",
             "Build a request dictionary holding the $noun"},
            {"send", "def f($a, $b):\n    $c = $lib.$op($b)\n    $a.send($c)\n    return len($c)\n",
             "Send the $noun over a connection"},
            {"validate", "def f($a):\n    $b = $lib.$op($a)\n    if $b is None:\n        raise ValueError($key)\n    return $b\n",
             "Validate the $noun and fail when missing"},
            {"extract", "def f($a):\n    $b = []\n    for $c in $a.split(\";\"):\n        $b.append($lib.$op($c))\n    return $b\n",
             "Extract every $noun from a header string"},
        },
        {
            {"url", {{"lib", "urlparse"}, {"op", "urlsplit"}, {"key", "\"href\""}}},
            {"header", {{"lib", "httputil"}, {"op", "get_header"}, {"key", "\"Accept\""}}},
            {"token", {{"lib", "jwt"}, {"op", "decode_token"}, {"key", "\"auth\""}}},
            {"email", {{"lib", "mailer"}, {"op", "parse_address"}, {"key", "\"to\""}}},
            {"query", {{"lib", "qs"}, {"op", "parse_qs"}, {"key", "\"q\""}}},
            {"cookie", {{"lib", "cookies"}, {"op", "parse_cookie"}, {"key", "\"sid\""}}},
        },
        {"url", "host", "port", "req", "resp", "msg", "body", "tok", "user", "session", "params", "query",
         "cookie", "hdrs", "code", "status", "conn", "client", "reply", "addr", "uri", "key", "sig", "agent"},
    };
    switch (f) {
    case TemplateFamily::A: return a;
    case TemplateFamily::B: return b;
    case TemplateFamily::C: return c;
    }
    return a;
}

inline std::string substitute(std::string text, const std::map<std::string, std::string>& slots) {
    // Longest keys first so "$lib" is not clobbered by a shorter key.
    std::vector<std::pair<std::string, std::string>> ordered(slots.begin(), slots.end());
    std::sort(ordered.begin(), ordered.end(), [](const auto& x, const auto& y) { return x.first.size() > y.first.size(); });
    for (const auto& [key, value] : ordered) {
        const std::string pattern = "$" + key;
        for (std::size_t pos = text.find(pattern); pos != std::string::npos; pos = text.find(pattern, pos + value.size()))
            text.replace(pos, pattern.size(), value);
    }
    return text;
}

} // namespace synthetic

/// `n` syntactically valid functions from the given template family. Deterministic in
/// (family, n, seed, task). Sample ids are "<family>-<seed>-<index>".
inline std::vector<CodeSample> generate_synthetic_corpus(TemplateFamily fam, std::size_t n, std::uint64_t seed,
                                                         Task task = Task::mnp) {
    if (n < 1) throw ConfigError("generate_synthetic_corpus: n must be at least 1");
    const auto& family = synthetic::family(fam);
    const std::string tag = to_string(fam);
    Rng rng(derive_seed(seed, "synthetic-" + tag));
    std::vector<CodeSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& tpl = family.templates[uniform_index(rng, family.templates.size())];
        const auto& noun = family.nouns[uniform_index(rng, family.nouns.size())];
        std::vector<std::string> pool = family.identifiers;
        std::map<std::string, std::string> slots = noun.slots;
        for (const char* placeholder : {"a", "b", "c", "d"}) {
            const std::size_t j = uniform_index(rng, pool.size());
            slots[placeholder] = pool[j];
            pool.erase(pool.begin() + std::ptrdiff_t(j));
        }
        CodeSample s;
        s.id = tag + "-" + std::to_string(seed) + "-" + std::to_string(i);
        s.raw_source = synthetic::substitute(tpl.code, slots);
        s.raw_target = task == Task::mnp ? tpl.verb + "_" + noun.word
                                         : synthetic::substitute(tpl.summary, {{"noun", noun.word}});
        s.label = Label::clean;
        s.origin = "synth" + tag;
        out.push_back(std::move(s));
    }
    return out;
}

/// Template verbs of a family, exposed for membership checks in tests.
inline std::vector<std::string> family_verbs(TemplateFamily fam) {
    std::vector<std::string> verbs;
    for (const auto& t : synthetic::family(fam).templates) verbs.push_back(t.verb);
    return verbs;
}

inline std::vector<std::string> family_nouns(TemplateFamily fam) {
    std::vector<std::string> nouns;
    for (const auto& n : synthetic::family(fam).nouns) nouns.push_back(n.word);
    return nouns;
}

inline const std::vector<std::string>& family_identifiers(TemplateFamily fam) { return synthetic::family(fam).identifiers; }

} // namespace stabforge
