#include "psychoforge/scales.hpp"

#include <algorithm>
#include <charconv>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "psychoforge/table.hpp"

namespace psychoforge {

ScaleDefinition::ScaleDefinition(std::string name, std::vector<ItemDefinition> items, int response_min,
                                 int response_max)
    : name_(std::move(name)), items_(std::move(items)), response_min_(response_min), response_max_(response_max) {
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (!index_.emplace(items_[i].id, i).second) {
            throw ValidationError(fmt::format("scale '{}': duplicate item id '{}'", name_, items_[i].id));
        }
        if (items_[i].facet &&
            std::find(facets_.begin(), facets_.end(), *items_[i].facet) == facets_.end()) {
            facets_.push_back(*items_[i].facet);
        }
    }
    validate();
}

void ScaleDefinition::validate() const {
    if (items_.empty()) throw ValidationError(fmt::format("scale '{}': no items", name_));
    if (response_min_ >= response_max_) {
        throw ValidationError(
            fmt::format("scale '{}': empty response range [{}, {}]", name_, response_min_, response_max_));
    }
    const bool any_facet = std::any_of(items_.begin(), items_.end(), [](const auto& it) { return it.facet; });
    for (const auto& it : items_) {
        if (it.id.empty()) throw ValidationError(fmt::format("scale '{}': empty item id", name_));
        if (any_facet && !it.facet) {
            throw ValidationError(fmt::format("scale '{}': item '{}' has no facet", name_, it.id));
        }
        if (it.facet && facet_domain(*it.facet) != it.domain) {
            throw ValidationError(fmt::format("scale '{}': facet '{}' spans domains (item '{}')", name_, *it.facet, it.id));
        }
    }

    auto expect_shape = [&](std::size_t n_items, int lo, int hi, std::size_t per_domain, bool facets) {
        if (items_.size() != n_items) {
            throw ValidationError(fmt::format("scale '{}': expected {} items, found {}", name_, n_items, items_.size()));
        }
        if (response_min_ != lo || response_max_ != hi) {
            throw ValidationError(fmt::format("scale '{}': expected range [{}, {}]", name_, lo, hi));
        }
        for (Domain d : kDomains) {
            if (items_in_domain(d).size() != per_domain) {
                throw ValidationError(
                    fmt::format("scale '{}': domain {} needs {} items", name_, domain_code(d), per_domain));
            }
        }
        if (facets != any_facet) {
            throw ValidationError(
                fmt::format("scale '{}': facets must be {}", name_, facets ? "declared on every item" : "absent"));
        }
    };
    if (name_ == "BFI2") {
        expect_shape(60, 1, 5, 12, true);
        if (facets_.size() != 15) throw ValidationError("scale 'BFI2': expected 15 facets");
        for (const auto& f : facets_) {
            if (items_in_facet(f).size() != 4) {
                throw ValidationError(fmt::format("scale 'BFI2': facet '{}' needs 4 items", f));
            }
        }
    } else if (name_ == "Mini-Markers") {
        expect_shape(40, 1, 9, 8, false);
    }
}

std::optional<std::size_t> ScaleDefinition::index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

const ItemDefinition& ScaleDefinition::item(std::string_view id) const {
    auto idx = index_of(id);
    if (!idx) throw ValidationError(fmt::format("scale '{}': unknown item '{}'", name_, id));
    return items_[*idx];
}

Domain ScaleDefinition::facet_domain(std::string_view facet) const {
    for (const auto& it : items_) {
        if (it.facet && *it.facet == facet) return it.domain;
    }
    throw ValidationError(fmt::format("scale '{}': unknown facet '{}'", name_, facet));
}

std::vector<std::size_t> ScaleDefinition::items_in_domain(Domain d) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].domain == d) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> ScaleDefinition::items_in_facet(std::string_view facet) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].facet && *items_[i].facet == facet) out.push_back(i);
    }
    return out;
}

bool ScaleDefinition::has_domain(Domain d) const {
    return std::any_of(items_.begin(), items_.end(), [d](const auto& it) { return it.domain == d; });
}

ScaleDefinition parse_scale(std::string_view json_text) {
    nlohmann::json doc = nlohmann::json::parse(json_text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw ParseError("item bank: not a JSON object");
    try {
        std::vector<ItemDefinition> items;
        for (const auto& node : doc.at("items")) {
            ItemDefinition it;
            it.id = node.at("id").get<std::string>();
            it.text = node.at("text").get<std::string>();
            const auto domain_text = node.at("domain").get<std::string>();
            auto domain = parse_domain(domain_text);
            if (!domain) throw ValidationError(fmt::format("item '{}': unknown domain '{}'", it.id, domain_text));
            it.domain = *domain;
            if (node.contains("facet") && !node["facet"].is_null()) it.facet = node["facet"].get<std::string>();
            const auto keying = node.at("keying").get<std::string>();
            if (keying == "positive") {
                it.keying = Keying::positive;
            } else if (keying == "reversed") {
                it.keying = Keying::reversed;
            } else {
                throw ValidationError(fmt::format("item '{}': keying must be positive|reversed", it.id));
            }
            const auto kind = node.value("kind", std::string("statement"));
            if (kind == "statement") {
                it.kind = ItemKind::statement;
            } else if (kind == "adjective") {
                it.kind = ItemKind::adjective;
            } else {
                throw ValidationError(fmt::format("item '{}': kind must be statement|adjective", it.id));
            }
            items.push_back(std::move(it));
        }
        if (doc.contains("item_count") && doc["item_count"].get<std::size_t>() != items.size()) {
            throw ValidationError(fmt::format("item bank declares {} items but lists {}",
                                              doc["item_count"].get<std::size_t>(), items.size()));
        }
        return ScaleDefinition(doc.at("name").get<std::string>(), std::move(items), doc.at("response_min").get<int>(),
                               doc.at("response_max").get<int>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("item bank: {}", e.what()));
    }
}

ScaleDefinition load_scale(const std::filesystem::path& path) {
    try {
        return parse_scale(read_text_file(path));
    } catch (const ParseError& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    } catch (const ValidationError& e) {
        throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

int reverse_code(int answer, const ScaleDefinition& scale) {
    if (answer < scale.response_min() || answer > scale.response_max()) {
        throw ValidationError(fmt::format("answer {} outside [{}, {}]", answer, scale.response_min(),
                                          scale.response_max()));
    }
    return scale.response_min() + scale.response_max() - answer;
}

void validate_responses(const ResponseVector& responses, const ScaleDefinition& scale) {
    for (const auto& it : scale.items()) {
        auto found = responses.answers.find(it.id);
        if (found == responses.answers.end()) {
            throw ValidationError(fmt::format("{}: missing answer for item '{}'", scale.name(), it.id));
        }
        if (found->second < scale.response_min() || found->second > scale.response_max()) {
            throw ValidationError(fmt::format("{}: item '{}' answer {} outside [{}, {}]", scale.name(), it.id,
                                              found->second, scale.response_min(), scale.response_max()));
        }
    }
    if (responses.answers.size() != scale.size()) {
        for (const auto& [id, value] : responses.answers) {
            if (!scale.index_of(id)) throw ValidationError(fmt::format("{}: unknown item '{}'", scale.name(), id));
        }
    }
}

double ScoreReport::domain(Domain d) const {
    auto it = domain_scores.find(d);
    if (it == domain_scores.end()) throw ValidationError(fmt::format("no score for domain {}", domain_code(d)));
    return it->second;
}

namespace {

double keyed_value(const ItemDefinition& item, int answer, const ScaleDefinition& scale) {
    return item.keying == Keying::reversed ? reverse_code(answer, scale) : answer;
}

}  // namespace

ScoreReport score(const ResponseVector& responses, const ScaleDefinition& scale) {
    validate_responses(responses, scale);
    auto mean_of = [&](const std::vector<std::size_t>& idx) {
        double sum = 0.0;
        for (std::size_t i : idx) {
            const auto& it = scale.items()[i];
            sum += keyed_value(it, responses.answers.at(it.id), scale);
        }
        return sum / static_cast<double>(idx.size());
    };
    ScoreReport report;
    for (Domain d : kDomains) {
        auto idx = scale.items_in_domain(d);
        if (!idx.empty()) report.domain_scores[d] = mean_of(idx);
    }
    if (scale.has_facets()) {
        std::map<std::string, double> facets;
        for (const auto& f : scale.facets()) facets[f] = mean_of(scale.items_in_facet(f));
        report.facet_scores = std::move(facets);
    }
    return report;
}

Matrix response_matrix(const std::vector<ResponseVector>& responses, const ScaleDefinition& scale,
                       bool recode_reversed) {
    Matrix m(static_cast<Eigen::Index>(responses.size()), static_cast<Eigen::Index>(scale.size()));
    for (std::size_t r = 0; r < responses.size(); ++r) {
        validate_responses(responses[r], scale);
        for (std::size_t c = 0; c < scale.size(); ++c) {
            const auto& it = scale.items()[c];
            const int a = responses[r].answers.at(it.id);
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                recode_reversed ? keyed_value(it, a, scale) : a;
        }
    }
    return m;
}

std::string default_agent_id(std::size_t index) { return fmt::format("agent-{:04d}", index + 1); }

ResponseTable read_response_table(const std::filesystem::path& path, const ScaleDefinition& scale) {
    const Table table = read_table(path);
    const auto id_column = table.column("agent_id");
    std::vector<std::pair<std::size_t, std::string>> item_columns;
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        if (id_column && c == *id_column) continue;
        if (!scale.index_of(table.header[c])) {
            throw ValidationError(fmt::format("{}: column '{}' is not an item of {}", path.string(), table.header[c],
                                              scale.name()));
        }
        item_columns.emplace_back(c, table.header[c]);
    }
    ResponseTable out;
    std::set<std::string> seen;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        std::string id = id_column ? row[*id_column] : default_agent_id(r);
        if (!seen.insert(id).second) throw ValidationError(fmt::format("{}: duplicate agent id '{}'", path.string(), id));
        ResponseVector rv{scale.name(), {}};
        for (const auto& [c, item] : item_columns) {
            int value = 0;
            const auto& cell = row[c];
            auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
            if (ec != std::errc() || ptr != cell.data() + cell.size()) {
                throw ParseError(fmt::format("{}: row {} item '{}': '{}' is not an integer", path.string(), r + 1,
                                             item, cell));
            }
            rv.answers[item] = value;
        }
        try {
            validate_responses(rv, scale);
        } catch (const ValidationError& e) {
            throw ValidationError(fmt::format("{}: row {}: {}", path.string(), r + 1, e.what()));
        }
        out.agent_ids.push_back(std::move(id));
        out.responses.push_back(std::move(rv));
    }
    return out;
}

void write_response_table(const std::filesystem::path& path, const ResponseTable& table,
                          const ScaleDefinition& scale) {
    Table out;
    out.header.push_back("agent_id");
    for (const auto& it : scale.items()) out.header.push_back(it.id);
    for (std::size_t r = 0; r < table.responses.size(); ++r) {
        std::vector<std::string> row;
        row.push_back(r < table.agent_ids.size() ? table.agent_ids[r] : default_agent_id(r));
        for (const auto& it : scale.items()) row.push_back(std::to_string(table.responses[r].answers.at(it.id)));
        out.rows.push_back(std::move(row));
    }
    write_table(path, out);
}

}  // namespace psychoforge
