#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "skillforge/common.hpp"
#include "skillforge/corpus.hpp"

namespace sftest {

// Scoped temp directory under the system temp root.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<unsigned> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("skillforge-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string random_word(skillforge::rng::Engine& eng, std::size_t min_len = 2,
                               std::size_t max_len = 7) {
  const std::size_t len =
      min_len + static_cast<std::size_t>(skillforge::rng::uniform_below(eng, max_len - min_len + 1));
  std::string w;
  for (std::size_t i = 0; i < len; ++i) {
    w += static_cast<char>('a' + skillforge::rng::uniform_below(eng, 26));
  }
  return w;
}

inline std::string random_text(skillforge::rng::Engine& eng, std::size_t min_words,
                               std::size_t max_words) {
  const std::size_t n = min_words + static_cast<std::size_t>(skillforge::rng::uniform_below(
                                        eng, max_words - min_words + 1));
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += random_word(eng);
  }
  return out;
}

// Random skill dataset: every story carries 1..max_skills distinct skills,
// one pair each. Used by split/stats/subsample oracles.
inline skillforge::SkillDataset random_skill_dataset(std::uint64_t seed, std::size_t n_stories,
                                                     std::size_t max_skills = 3) {
  using namespace skillforge;
  rng::Engine eng(seed);
  SkillDataset ds;
  ds.provenance = "synthetic";
  for (std::size_t i = 0; i < n_stories; ++i) {
    Story story;
    story.id = "s" + std::to_string(i);
    story.text = random_text(eng, 3, 30);
    std::vector<Skill> skills(kAllSkills.begin(), kAllSkills.end());
    rng::shuffle(skills, eng);
    const std::size_t k =
        1 + static_cast<std::size_t>(rng::uniform_below(eng, max_skills));
    for (std::size_t s = 0; s < k; ++s) {
      QAPair p;
      p.id = story.id + ".q" + std::to_string(s);
      p.question = random_text(eng, 2, 8) + " ?";
      p.answer = random_text(eng, 1, 5);
      p.skill = skills[s];
      p.qtype = rng::uniform01(eng) < 0.5 ? QuestionType::Literal : QuestionType::Inferential;
      story.pairs.push_back(std::move(p));
    }
    ds.stories.push_back(std::move(story));
  }
  return ds;
}

inline void write_lines(const std::filesystem::path& path, const std::string& content) {
  skillforge::write_file(path, content);
}

}  // namespace sftest
