#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "psychoforge/common.hpp"

namespace psychoforge {

enum class Keying { positive, reversed };
enum class ItemKind { statement, adjective };

struct ItemDefinition {
    std::string id;
    std::string text;
    Domain domain = Domain::O;
    std::optional<std::string> facet;
    Keying keying = Keying::positive;
    ItemKind kind = ItemKind::statement;
};

/// An instrument: ordered items plus the integer response range.
///
/// Construction validates the invariants: unique ids, a non-empty range,
/// facets declared on all items or none, each facet inside one domain, and
/// the fixed shapes of the two bundled instruments ("BFI2": 60 items on
/// [1,5] with 3 facets x 4 items per domain; "Mini-Markers": 40 adjectives on
/// [1,9], 8 per domain, no facets).
class ScaleDefinition {
public:
    ScaleDefinition() = default;
    ScaleDefinition(std::string name, std::vector<ItemDefinition> items, int response_min, int response_max);

    const std::string& name() const { return name_; }
    const std::vector<ItemDefinition>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }
    int response_min() const { return response_min_; }
    int response_max() const { return response_max_; }

    std::optional<std::size_t> index_of(std::string_view id) const;
    const ItemDefinition& item(std::string_view id) const;

    bool has_facets() const { return !facets_.empty(); }
    /// Facet names in order of first appearance.
    const std::vector<std::string>& facets() const { return facets_; }
    Domain facet_domain(std::string_view facet) const;

    std::vector<std::size_t> items_in_domain(Domain d) const;
    std::vector<std::size_t> items_in_facet(std::string_view facet) const;
    bool has_domain(Domain d) const;

private:
    void validate() const;

    std::string name_;
    std::vector<ItemDefinition> items_;
    int response_min_ = 1;
    int response_max_ = 5;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> facets_;
};

/// Parses the item-bank document:
/// `{name, response_min, response_max, item_count?, items: [{id, text, domain, facet?, keying, kind}]}`.
ScaleDefinition parse_scale(std::string_view json_text);
ScaleDefinition load_scale(const std::filesystem::path& path);

struct ResponseVector {
    std::string scale_name;
    std::map<std::string, int> answers;
};

/// min + max - answer.
int reverse_code(int answer, const ScaleDefinition& scale);

/// Throws ValidationError naming the first missing, unknown or out-of-range item.
void validate_responses(const ResponseVector& responses, const ScaleDefinition& scale);

struct ScoreReport {
    std::map<Domain, double> domain_scores;
    std::optional<std::map<std::string, double>> facet_scores;

    double domain(Domain d) const;
};

/// Domain (and facet) scores as means of the reverse-coded items.
ScoreReport score(const ResponseVector& responses, const ScaleDefinition& scale);

/// Item-major matrix view (rows = respondents, columns = scale items).
/// Reversed items are recoded when `recode_reversed` is set.
Matrix response_matrix(const std::vector<ResponseVector>& responses, const ScaleDefinition& scale,
                       bool recode_reversed);

struct ResponseTable {
    std::vector<std::string> agent_ids;
    std::vector<ResponseVector> responses;
};

/// Reads a delimited response matrix (header row of item ids, one row per
/// respondent). A leading `agent_id` column is optional; without it rows are
/// numbered `agent-0001`, `agent-0002`, ...
ResponseTable read_response_table(const std::filesystem::path& path, const ScaleDefinition& scale);
void write_response_table(const std::filesystem::path& path, const ResponseTable& table,
                          const ScaleDefinition& scale);

std::string default_agent_id(std::size_t index);

}  // namespace psychoforge
