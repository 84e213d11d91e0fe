#pragma once

#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "elen/vocab.hpp"

namespace elen {

// The 26 classes emitted by the upstream domain classifier.
inline constexpr std::array<std::string_view, 26> kDomainClasses = {
    "Adult", "Arts_and_Entertainment", "Autos_and_Vehicles",
    "Beauty_and_Fitness", "Books_and_Literature", "Business_and_Industrial",
    "Computers_and_Electronics", "Finance", "Food_and_Drink", "Games",
    "Health", "Hobbies_and_Leisure", "Home_and_Garden",
    "Internet_and_Telecom", "Jobs_and_Education", "Law_and_Government",
    "News", "Online_Communities", "People_and_Society", "Pets_and_Animals",
    "Real_Estate", "Science", "Sensitive_Subjects", "Shopping", "Sports",
    "Travel_and_Transportation"};

// Target domain -> classifier class.
inline const std::map<std::string, std::string> kDomainMapping = {
    {"biomed", "Health"}, {"legal", "Law_and_Government"}};

struct Document {
    std::string id;
    std::string text;
    std::string lang;
    std::optional<double> quality;
    std::optional<std::map<std::string, double>> domain_probs;

    void validate() const {
        if (domain_probs) {
            double sum = 0.0;
            for (const auto& [cls, p] : *domain_probs) {
                if (p < 0.0)
                    throw std::runtime_error("document " + id + ": negative class probability");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw std::runtime_error("document " + id + ": class probabilities do not sum to 1");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"id", id}, {"text", text}, {"lang", lang}};
        if (quality) j["quality"] = *quality;
        if (domain_probs) j["domain_probs"] = *domain_probs;
        return j;
    }

    static Document from_json(const nlohmann::json& j) {
        Document d;
        d.id = j.at("id").get<std::string>();
        d.text = j.at("text").get<std::string>();
        d.lang = j.value("lang", std::string());
        if (j.contains("quality")) d.quality = j.at("quality").get<double>();
        if (j.contains("domain_probs"))
            d.domain_probs = j.at("domain_probs").get<std::map<std::string, double>>();
        d.validate();
        return d;
    }
};

inline std::vector<Document> read_ndjson(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::vector<Document> docs;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        docs.push_back(Document::from_json(nlohmann::json::parse(line)));
    }
    return docs;
}

inline void write_ndjson(const std::string& path, const std::vector<Document>& docs) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (const auto& d : docs) f << d.to_json().dump() << '\n';
}

namespace detail {

inline std::string collapse_whitespace(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool in_ws = false;
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            in_ws = true;
            continue;
        }
        if (in_ws && !out.empty()) out += ' ';
        in_ws = false;
        out += char(c);
    }
    return out;
}

inline std::string sha256(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    return std::string(reinterpret_cast<char*>(digest), len);
}

}  // namespace detail

// Exact document-level dedup.  The key is a 256-bit hash of the
// whitespace-collapsed text; first occurrence wins, order is stable.
inline std::vector<Document> dedup_exact(const std::vector<Document>& docs) {
    std::vector<Document> out;
    std::unordered_set<std::string> seen;
    seen.reserve(docs.size() * 2);
    for (const auto& d : docs)
        if (seen.insert(detail::sha256(detail::collapse_whitespace(d.text))).second)
            out.push_back(d);
    return out;
}

// Drops documents whose quality score is below the threshold (exactly at the
// threshold survives).  Documents without a score pass through.
inline std::vector<Document> quality_filter(const std::vector<Document>& docs,
                                            double threshold = 0.2) {
    std::vector<Document> out;
    for (const auto& d : docs)
        if (!d.quality || *d.quality >= threshold) out.push_back(d);
    return out;
}

// Top-1 selection: a document lands in a target domain only when the mapped
// class is the unique argmax of the probability vector.
inline std::optional<std::string> domain_select(
    const std::map<std::string, double>& probs,
    const std::map<std::string, std::string>& mapping = kDomainMapping) {
    if (probs.empty())
        throw std::invalid_argument("domain_select: empty probability map");
    double best = -1.0;
    std::string best_class;
    size_t n_best = 0;
    for (const auto& [cls, p] : probs) {
        if (p > best) {
            best = p;
            best_class = cls;
            n_best = 1;
        } else if (p == best) {
            ++n_best;
        }
    }
    if (n_best != 1) return std::nullopt;
    for (const auto& [target, cls] : mapping)
        if (cls == best_class) return target;
    return std::nullopt;
}

// src ++ "<|translation|>" ++ tgt; the separator encodes to the TRANSLATION id.
inline std::string format_translation_pair(const std::string& src,
                                           const std::string& tgt) {
    if (src.empty() || tgt.empty())
        throw std::invalid_argument("format_translation_pair: empty side");
    return src + std::string(kSpecialLiteral[size_t(Special::Translation)]) + tgt;
}

}  // namespace elen
