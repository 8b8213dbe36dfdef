#pragma once

// Transcript alignment. lcs_align anchors an ASR hypothesis against the
// ground truth via longest-common-subsequence; derive_edit_script turns the
// anchor gaps into per-token keep/delete/change labels plus the change
// targets a corrector must produce. Reconstruction is lossless: keeping K
// tokens, dropping D tokens and splicing in the C targets (terminator
// stripped) yields the ground truth exactly, provided the hypothesis is
// non-empty whenever the ground truth is.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m4ser/common.hpp"

namespace m4ser {

using TokenSeq = std::vector<std::int32_t>;

// Reserved vocabulary ids shared by every token consumer.
constexpr std::int32_t kPadId = 0;
constexpr std::int32_t kBosId = 1;
constexpr std::int32_t kEosId = 2;
constexpr std::int32_t kFirstContentId = 3;

enum class EditLabel : std::uint8_t { Keep = 0, Delete = 1, Change = 2 };

struct CorrectionTask {
  std::size_t position = 0;  // index of the C-labeled hypothesis token
  TokenSeq target;           // replacement tokens, end-of-sequence id appended
};

struct EditScript {
  std::vector<EditLabel> labels;  // one per hypothesis token
  std::vector<CorrectionTask> tasks;
};

// Anchor pairs (hypothesis index, reference index), strictly increasing in
// both coordinates. Ties resolve by the standard backtrace preferring a
// diagonal match over dropping the trailing hypothesis token over dropping
// the trailing reference token.
inline std::vector<std::pair<std::size_t, std::size_t>> lcs_align(const TokenSeq& hyp, const TokenSeq& ref) {
  const std::size_t n = hyp.size(), m = ref.size();
  std::vector<std::vector<std::size_t>> L(n + 1, std::vector<std::size_t>(m + 1, 0));
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      L[i][j] = hyp[i - 1] == ref[j - 1] ? L[i - 1][j - 1] + 1 : std::max(L[i - 1][j], L[i][j - 1]);

  std::vector<std::pair<std::size_t, std::size_t>> anchors;
  std::size_t i = n, j = m;
  while (i > 0 && j > 0) {
    if (hyp[i - 1] == ref[j - 1] && L[i][j] == L[i - 1][j - 1] + 1) {
      anchors.emplace_back(i - 1, j - 1);
      --i;
      --j;
    } else if (L[i - 1][j] == L[i][j]) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(anchors.begin(), anchors.end());
  return anchors;
}

// Gap handling, with (h, r) the unanchored token ranges between two anchors
// (or beyond the outermost ones):
//   h and r non-empty: first h token becomes C targeting r, the rest D
//   r empty:           every h token becomes D
//   h empty (pure insertion): the anchor left of the gap absorbs r into its
//       own replacement and becomes C; a gap before the first anchor prepends
//       to the first anchor instead
inline EditScript derive_edit_script(const TokenSeq& hyp, const TokenSeq& ref, std::int32_t eos_id = kEosId) {
  if (hyp.empty() && !ref.empty())
    fail("derive_edit_script: empty hypothesis cannot host a change for a non-empty reference");

  EditScript script;
  if (hyp.empty()) return script;

  const auto anchors = lcs_align(hyp, ref);

  // replacement span per hypothesis token; anchored tokens start as themselves
  std::vector<TokenSeq> repl(hyp.size());
  std::vector<bool> anchored(hyp.size(), false);
  for (const auto& [hi, ri] : anchors) {
    repl[hi] = {ref[ri]};
    anchored[hi] = true;
  }

  const std::size_t gaps = anchors.size() + 1;
  for (std::size_t gap = 0; gap < gaps; ++gap) {
    const std::size_t h_begin = gap == 0 ? 0 : anchors[gap - 1].first + 1;
    const std::size_t h_end = gap == anchors.size() ? hyp.size() : anchors[gap].first;
    const std::size_t r_begin = gap == 0 ? 0 : anchors[gap - 1].second + 1;
    const std::size_t r_end = gap == anchors.size() ? ref.size() : anchors[gap].second;
    const bool has_h = h_begin < h_end;
    const bool has_r = r_begin < r_end;
    if (!has_r) continue;  // any hypothesis tokens here stay at their empty default (D)
    TokenSeq r_tokens(ref.begin() + r_begin, ref.begin() + r_end);
    if (has_h) {
      repl[h_begin] = std::move(r_tokens);
    } else if (gap > 0) {
      TokenSeq& host = repl[anchors[gap - 1].first];
      host.insert(host.end(), r_tokens.begin(), r_tokens.end());
    } else {
      // insertion before the first anchor; no anchors at all cannot happen
      // here because has_h would be true for the whole-sequence gap
      TokenSeq& host = repl[anchors[0].first];
      host.insert(host.begin(), r_tokens.begin(), r_tokens.end());
    }
  }

  script.labels.resize(hyp.size());
  for (std::size_t k = 0; k < hyp.size(); ++k) {
    const bool is_self = anchored[k] && repl[k].size() == 1 && repl[k][0] == hyp[k];
    if (is_self) {
      script.labels[k] = EditLabel::Keep;
    } else if (repl[k].empty()) {
      script.labels[k] = EditLabel::Delete;
    } else {
      script.labels[k] = EditLabel::Change;
      CorrectionTask task;
      task.position = k;
      task.target = repl[k];
      task.target.push_back(eos_id);
      script.tasks.push_back(std::move(task));
    }
  }
  return script;
}

// Replays an edit script: K copies, D drops, C splices in the task target
// with the terminator stripped.
inline TokenSeq apply_edit_script(const TokenSeq& hyp, const EditScript& script) {
  if (script.labels.size() != hyp.size())
    fail("apply_edit_script: " + std::to_string(script.labels.size()) + " labels for " +
         std::to_string(hyp.size()) + " tokens");
  TokenSeq out;
  std::size_t next_task = 0;
  for (std::size_t k = 0; k < hyp.size(); ++k) {
    switch (script.labels[k]) {
      case EditLabel::Keep:
        out.push_back(hyp[k]);
        break;
      case EditLabel::Delete:
        break;
      case EditLabel::Change: {
        if (next_task >= script.tasks.size() || script.tasks[next_task].position != k)
          fail("apply_edit_script: no task recorded for C-labeled position " + std::to_string(k));
        const TokenSeq& t = script.tasks[next_task].target;
        out.insert(out.end(), t.begin(), t.end() - 1);  // strip the terminator
        ++next_task;
        break;
      }
    }
  }
  return out;
}

inline std::size_t levenshtein_distance(const TokenSeq& hyp, const TokenSeq& ref) {
  const std::size_t n = hyp.size(), m = ref.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

// Levenshtein distance over tokens divided by the reference length.
inline double word_error_rate(const TokenSeq& hyp, const TokenSeq& ref) {
  if (ref.empty()) fail("word_error_rate: empty reference");
  return static_cast<double>(levenshtein_distance(hyp, ref)) / static_cast<double>(ref.size());
}

}  // namespace m4ser
