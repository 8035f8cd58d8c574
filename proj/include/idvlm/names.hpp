#pragma once

#include <array>
#include <string_view>

namespace idvlm {

// Built-in pool of person names handed out to ID references.
inline constexpr std::array<std::string_view, 200> kDefaultNames = {
    "Julia", "Tom", "Carol", "Hal", "Timmy", "Anna", "Ben", "Clara",
    "David", "Emma", "Frank", "Grace", "Henry", "Iris", "Jack", "Kate",
    "Leo", "Mia", "Noah", "Olivia", "Paul", "Quinn", "Rose", "Sam",
    "Tina", "Victor", "Wendy", "Xavier", "Yara", "Zoe", "Adam", "Bella",
    "Caleb", "Daisy", "Ethan", "Fiona", "George", "Hannah", "Ian", "Jade",
    "Kevin", "Laura", "Mason", "Nora", "Oscar", "Penny", "Ryan", "Sophie",
    "Theo", "Uma", "Vince", "Willa", "Alex", "Beth", "Chris", "Diana",
    "Eli", "Faye", "Gavin", "Holly", "Isaac", "Jenna", "Kyle", "Lily",
    "Marcus", "Nina", "Owen", "Piper", "Reid", "Sara", "Tyler", "Ursula",
    "Vera", "Wade", "Yvonne", "Zach", "Amber", "Brian", "Cora", "Derek",
    "Elena", "Felix", "Gina", "Hugo", "Ivy", "Jonah", "Kira", "Lucas",
    "Maya", "Nolan", "Opal", "Peter", "Ruby", "Simon", "Tessa", "Uriel",
    "Violet", "Walter", "Ximena", "Yusuf", "Zelda", "Aaron", "Bianca", "Colin",
    "Delia", "Evan", "Freya", "Grant", "Heidi", "Igor", "Joy", "Karl",
    "Lena", "Miles", "Nadia", "Otto", "Paige", "Rex", "Stella", "Troy",
    "Una", "Wayne", "Abby", "Blake", "Cindy", "Dean", "Erin", "Fred",
    "Gwen", "Harold", "Ingrid", "Jason", "Kelly", "Luke", "Megan", "Neil",
    "Olga", "Phil", "Rita", "Seth", "Tara", "Ulric", "Val", "Will",
    "Yuri", "Zane", "Alice", "Bruce", "Celia", "Dylan", "Edith", "Floyd",
    "Gloria", "Hank", "Irene", "Jared", "Kim", "Lance", "Mabel", "Ned",
    "Odette", "Perry", "Rosa", "Scott", "Thea", "Uli", "Vivian", "Wyatt",
    "Yolanda", "Zora", "Arthur", "Brooke", "Cyrus", "Dora", "Elliot", "Flora",
    "Glen", "Hazel", "Ivan", "Josie", "Kurt", "Lara", "Milo", "Nell",
    "Orson", "Pearl", "Roy", "Sylvia", "Trent", "Vance", "Wren", "Ada",
    "Boris", "Cleo", "Dante", "Elsa", "Flynn", "Greta", "Hector", "Imogen",
};

}  // namespace idvlm
